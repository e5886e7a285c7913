"""
Synthetic data with known truth for testing the full estimation pipeline.

A VAR(p) drives ``n_y`` aggregates (TFP first, an AR(1) with persistence 0.859
and innovation s.d. 0.014) together with ``K_true`` latent factors. Each
period's cross-section is drawn from a bivariate two-component Gaussian
mixture whose parameters move with the factors:

* ``f1`` shifts both component means along ``(1, 1)``;
* ``f2`` tilts the mixture weight;
* ``f3`` shifts the first component's mean along the first axis;
* ``f4`` scales the second component's covariance.

Because the map from factors to densities is analytic, impulse responses of
the aggregates and of the density itself can be computed exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import linalg, stats

from .density_panel import GridSpec
from .exceptions import InvalidConfigError
from .structural import irf_path

RHO_Z = 0.859
SIGMA_Z = 0.014
N_OBS_DEFAULT = 2809


@dataclass
class MixtureSpec:
    mean1: tuple = (-0.55, -0.45)
    mean2: tuple = (0.65, 0.55)
    cov1: tuple = ((0.50, 0.12), (0.12, 0.55))
    cov2: tuple = ((0.55, -0.08), (-0.08, 0.50))
    weight: float = 0.5
    shift_common: float = 0.15
    tilt: float = 0.06
    shift_first: float = 0.15
    log_scale: float = 0.10

    def parameters(self, f):
        """Weight, means and covariances at factor values ``f`` (length >= 4)."""
        f = np.zeros(4) if f is None else np.asarray(f, dtype=float)
        f = np.concatenate([f, np.zeros(max(0, 4 - f.size))])
        w = self.weight + self.tilt * f[1]
        m1 = np.asarray(self.mean1) + self.shift_common * f[0] * np.ones(2) + np.array([self.shift_first * f[2], 0.0])
        m2 = np.asarray(self.mean2) + self.shift_common * f[0] * np.ones(2)
        c1 = np.asarray(self.cov1, dtype=float)
        c2 = np.exp(self.log_scale * f[3]) * np.asarray(self.cov2, dtype=float)
        return w, (m1, m2), (c1, c2)

    def pdf(self, x, f=None):
        w, (m1, m2), (c1, c2) = self.parameters(f)
        return (w * stats.multivariate_normal(m1, c1).pdf(x)
                + (1.0 - w) * stats.multivariate_normal(m2, c2).pdf(x))

    def sample(self, f, n, rng):
        w, means, covs = self.parameters(f)
        first = rng.random(n) < w
        out = np.empty((n, 2))
        for comp, idx in ((0, first), (1, ~first)):
            k = int(idx.sum())
            if k:
                out[idx] = rng.multivariate_normal(means[comp], covs[comp], size=k)
        return out


def _default_phi(n_y, K):
    m = n_y + K
    Phi = np.zeros((m, m))
    Phi[0, 0] = RHO_Z
    for j in range(1, n_y):
        Phi[j, 0] = 0.3
        Phi[j, j] = 0.6
    rho = [0.85, 0.75, 0.8, 0.7]
    load = [6.0, -4.0, 3.0, 4.0]
    for k in range(K):
        Phi[n_y + k, n_y + k] = rho[k % 4]
        Phi[n_y + k, 0] = load[k % 4]
    return Phi[None]


def _default_impact(n_y, K):
    m = n_y + K
    L = np.zeros((m, m))
    L[0, 0] = SIGMA_Z
    for j in range(1, n_y):
        L[j, 0] = 0.01
        L[j, j] = 0.01
    on_tfp = [0.5, -0.4, 0.35, 0.4]
    for k in range(K):
        L[n_y + k, 0] = on_tfp[k % 4]
        L[n_y + k, n_y + k] = 0.6
    return L


@dataclass
class DgpConfig:
    """True VAR, impact matrix, mixture family and sample sizes.

    ``impact_true`` is the lower-triangular matrix with ``u_t = impact_true
    e_t``, ``e_t ~ N(0, I)``; its first column is the one-s.d. TFP shock.
    """

    n_y: int = 2
    K_true: int = 4
    p: int = 1
    T: int = 250
    grid: GridSpec = field(default_factory=lambda: GridSpec((25, 25), ((-2.2, 2.2), (-2.2, 2.2))))
    Phi_true: Optional[np.ndarray] = None
    impact_true: Optional[np.ndarray] = None
    mixture: MixtureSpec = field(default_factory=MixtureSpec)
    n_obs: int = N_OBS_DEFAULT
    burn_in: int = 50
    rho_z: float = RHO_Z
    sigma_z: float = SIGMA_Z

    def __post_init__(self):
        m = self.n_y + self.K_true
        if self.Phi_true is None:
            Phi = _default_phi(self.n_y, self.K_true)
            if self.p > 1:
                Phi = np.concatenate([Phi, np.zeros((self.p - 1, m, m))])
            Phi[0, 0, 0] = self.rho_z
            self.Phi_true = Phi
        if self.impact_true is None:
            L = _default_impact(self.n_y, self.K_true)
            L[0, 0] = self.sigma_z
            self.impact_true = L
        self.Phi_true = np.asarray(self.Phi_true, dtype=float).reshape(self.p, m, m)
        self.impact_true = np.asarray(self.impact_true, dtype=float)

    @property
    def m(self) -> int:
        return self.n_y + self.K_true

    @property
    def Sigma_true(self) -> np.ndarray:
        return self.impact_true @ self.impact_true.T

    def companion(self) -> np.ndarray:
        m, p = self.m, self.p
        C = np.zeros((m * p, m * p))
        C[:m] = np.hstack(list(self.Phi_true))
        C[m:, :-m] = np.eye(m * (p - 1))
        return C

    def unconditional_sd(self) -> np.ndarray:
        C = self.companion()
        Q = np.zeros_like(C)
        Q[: self.m, : self.m] = self.Sigma_true
        V = linalg.solve_discrete_lyapunov(C, Q)
        return np.sqrt(np.diag(V)[: self.m])

    def validate(self) -> list:
        problems = []
        m = self.m
        if self.n_y < 1 or self.K_true < 1 or self.p < 1:
            problems.append("n_y, K_true and p must be at least 1")
        if self.T < 1 or self.n_obs < 2:
            problems.append("T must be >= 1 and n_obs >= 2")
        if self.impact_true.shape != (m, m) or np.any(np.triu(self.impact_true, 1) != 0):
            problems.append("impact_true must be lower triangular")
        rad = float(np.max(np.abs(np.linalg.eigvals(self.companion()))))
        if not rad < 1:
            problems.append(f"Phi_true is not stable (spectral radius {rad:.4g})")
        elif self.K_true >= 2:
            sd = self.unconditional_sd()[self.n_y + 1]
            w = self.mixture.weight
            span = abs(self.mixture.tilt) * 6.0 * sd
            if not (0 < w - span and w + span < 1):
                problems.append("mixture weight leaves (0, 1) within 6 unconditional s.d. of f2")
        if self.grid.dims != 2:
            problems.append("the mixture family is bivariate; grid must have 2 dimensions")
        return problems

    def check(self) -> None:
        problems = self.validate()
        if problems:
            raise InvalidConfigError("; ".join(problems))


@dataclass
class Simulation:
    aggregates: np.ndarray       # T x n_y
    cross_sections: list         # T arrays of n_obs x 2
    factors: np.ndarray          # T x K_true
    densities: np.ndarray        # T x grid.shape, grid-normalized

    @property
    def states(self) -> np.ndarray:
        return np.hstack([self.aggregates, self.factors])


def density_on_grid(mix: MixtureSpec, grid: GridSpec, f=None) -> np.ndarray:
    """Analytic mixture density at the grid nodes, renormalized to a unit Riemann sum."""
    v = mix.pdf(grid.nodes(), f).reshape(grid.shape)
    return v / (v.sum() * grid.cell_volume)


def simulate(config: DgpConfig, seed: int = 0, draw_cross_sections: bool = True) -> Simulation:
    """Draw the state path, the per-period densities and cross-sections."""
    config.check()
    rng = np.random.default_rng(seed)
    m, p, T = config.m, config.p, config.T
    n = config.burn_in + T
    w = np.zeros((n + p, m))
    shocks = rng.standard_normal((n, m)) @ config.impact_true.T
    for t in range(p, n + p):
        w[t] = sum(config.Phi_true[l] @ w[t - 1 - l] for l in range(p)) + shocks[t - p]
    w = w[p + config.burn_in:]
    agg, fac = w[:, : config.n_y], w[:, config.n_y:]
    dens = np.stack([density_on_grid(config.mixture, config.grid, f) for f in fac])
    cs = [config.mixture.sample(f, config.n_obs, rng) for f in fac] if draw_cross_sections else []
    return Simulation(agg, cs, fac, dens)


@dataclass
class OracleIrf:
    horizons: tuple
    states: np.ndarray           # (Hmax + 1) x m
    mass_delta: dict             # horizon -> grid-shaped field
    steady_state: np.ndarray
    n_y: int

    @property
    def aggregates(self) -> np.ndarray:
        return self.states[:, : self.n_y]


def oracle_irf(config: DgpConfig, Hmax: int, horizons=(4, 8, 24), shock_index: int = 0) -> OracleIrf:
    """Exact responses to a one-s.d. shock and the implied density-mass changes."""
    config.check()
    impact = config.impact_true[:, shock_index]
    states = irf_path(config.Phi_true, impact, Hmax)
    base = density_on_grid(config.mixture, config.grid, None)
    deltas = {}
    for h in horizons:
        if h > Hmax:
            raise ValueError("horizon beyond Hmax")
        deltas[int(h)] = density_on_grid(config.mixture, config.grid, states[h, config.n_y:]) - base
    return OracleIrf(tuple(int(h) for h in horizons), states, deltas, base, config.n_y)


def write_cross_sections(path, sim: Simulation, names=("x1", "x2")) -> None:
    """Long CSV ``period,x1,x2`` with 1-based periods."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["period", *names])
        for t, xs in enumerate(sim.cross_sections, start=1):
            for row in xs:
                w.writerow([t] + [repr(float(v)) for v in row])


def write_aggregates(path, sim: Simulation, names=None) -> None:
    names = list(names) if names is not None else ["tfp"] + [f"y{j + 1}" for j in range(1, sim.aggregates.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["period", *names])
        for t, row in enumerate(sim.aggregates, start=1):
            w.writerow([t] + [repr(float(v)) for v in row])


def write_truth(directory, config: DgpConfig, sim: Simulation, Hmax: int = 24, horizons=(4, 8, 24)) -> None:
    """True factors and oracle responses next to the simulated data."""
    from .density_panel import write_field_csv

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "true_factors.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["period"] + [f"f{k + 1}" for k in range(config.K_true)])
        for t, row in enumerate(sim.factors, start=1):
            w.writerow([t] + [repr(float(v)) for v in row])
    orc = oracle_irf(config, Hmax, horizons)
    with open(d / "oracle_irf.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variable", "horizon", "value"])
        for j in range(config.m):
            name = f"y{j + 1}" if j < config.n_y else f"f{j - config.n_y + 1}"
            for h in range(Hmax + 1):
                w.writerow([name, h, repr(float(orc.states[h, j]))])
    for h, fld in orc.mass_delta.items():
        write_field_csv(d / f"oracle_firf_h{h:03d}.csv", _Field(config.grid, fld))


@dataclass
class _Field:
    grid: GridSpec
    values: np.ndarray
