"""
Structural identification and impulse responses.

Shocks are identified recursively: the impact matrix is the lower Cholesky
factor of the innovation covariance, so the variable ordered first (index 0,
the instrument) is contemporaneously exogenous. Responses are one-standard-
deviation shocks propagated through the companion form.

Functional responses map the factor block of each IRF back to the grid
through the loading matrix and report the change in density mass relative to
the steady-state density.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .density_panel import DensityField, GridSpec, write_field_csv
from .exceptions import NumericalError, ShapeError
from .favar_core import GibbsDraws, VarParams
from .tensor_factor import LoadingSet

AGG_QUANTILES = (0.05, 0.5, 0.95)
FIRF_LEVEL = 0.70
DEFAULT_HORIZONS = (4, 8, 24)


def cholesky_identify(Sigma, shock_index: int = 0) -> np.ndarray:
    """Column ``shock_index`` (0-based) of the lower Cholesky factor of ``Sigma``."""
    Sigma = np.asarray(Sigma, dtype=float)
    if not 0 <= shock_index < Sigma.shape[0]:
        raise IndexError(f"shock index {shock_index} out of range")
    try:
        L = np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("Sigma is not positive definite") from exc
    return L[:, shock_index].copy()


def irf_path(Phi: np.ndarray, impact: np.ndarray, Hmax: int) -> np.ndarray:
    """Responses ``(Hmax + 1) x m`` of a VAR with lag matrices ``Phi`` (``p x m x m``)."""
    if Hmax < 0:
        raise ValueError("Hmax must be nonnegative")
    Phi = np.asarray(Phi, dtype=float)
    p, m = Phi.shape[0], Phi.shape[1]
    out = np.zeros((Hmax + 1, m))
    out[0] = impact
    for h in range(1, Hmax + 1):
        for l in range(1, min(p, h) + 1):
            out[h] += Phi[l - 1] @ out[h - l]
    return out


def irf(params: VarParams, impact, Hmax: int) -> np.ndarray:
    """Companion-form propagation of ``impact``; row ``h`` is ``J C^h J' impact``."""
    return irf_path(params.Phi, np.asarray(impact, dtype=float), Hmax)


def _quantile_key(q):
    return repr(float(q))


@dataclass
class Irf:
    """Per-draw responses ``(n_draws, Hmax + 1, m)`` with pointwise summaries."""

    responses: np.ndarray
    names: list
    quantiles: tuple = AGG_QUANTILES
    explosive: Optional[np.ndarray] = None

    @property
    def Hmax(self) -> int:
        return self.responses.shape[1] - 1

    def summary(self, stable_only: bool = False) -> dict:
        R = self.responses
        if stable_only and self.explosive is not None and np.any(~self.explosive):
            R = R[~self.explosive]
        return {q: np.quantile(R, q, axis=0) for q in sorted(self.quantiles)}

    def to_rows(self, variables: Optional[Sequence[int]] = None):
        summ = self.summary()
        idx = range(len(self.names)) if variables is None else variables
        for v in idx:
            for h in range(self.Hmax + 1):
                for q, vals in summ.items():
                    yield self.names[v], h, q, vals[h, v]

    def write_csv(self, path, variables=None) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("variable,horizon,quantile,value\n")
            for name, h, q, v in self.to_rows(variables):
                fh.write(f"{name},{h},{_quantile_key(q)},{float(v)!r}\n")


def irf_draws(draws: GibbsDraws, Hmax: int, shock_index: int = 0, names=None,
              quantiles=AGG_QUANTILES) -> Irf:
    n, m = draws.n_draws, draws.m
    R = np.empty((n, Hmax + 1, m))
    for d in range(n):
        par = draws.params(d)
        R[d] = irf(par, cholesky_identify(par.Sigma, shock_index), Hmax)
    if names is None:
        names = [f"y{i + 1}" for i in range(draws.n_y)] + [f"f{k + 1}" for k in range(draws.K)]
    return Irf(R, list(names), tuple(quantiles), draws.explosive.copy())


def steady_state_scores(draws: GibbsDraws, loading_K: Optional[int] = None) -> np.ndarray:
    """Posterior mean of the unconditional factor mean over stable draws."""
    means = []
    for d in range(draws.n_draws):
        if draws.explosive[d]:
            continue
        par = draws.params(d)
        try:
            means.append(par.unconditional_mean()[draws.n_y:])
        except np.linalg.LinAlgError:
            continue
    if not means:
        return np.zeros(loading_K or draws.K)
    return np.mean(means, axis=0)


@dataclass
class Firf:
    """Functional responses on the grid.

    ``mass_delta`` has shape ``(n_draws, n_horizons, N_grid)`` in the
    column-major node order of the loading matrix.
    """

    grid: GridSpec
    horizons: tuple
    mass_delta: np.ndarray
    steady_state: DensityField
    level: float = FIRF_LEVEL
    quantiles: tuple = ()

    def __post_init__(self):
        if not self.quantiles:
            lo = (1.0 - self.level) / 2.0
            self.quantiles = (lo, 0.5, 1.0 - lo)

    def field(self, values) -> np.ndarray:
        """Reshape a node vector into the grid lattice."""
        return np.asarray(values).reshape(self.grid.shape, order="F")

    def median(self) -> np.ndarray:
        return np.median(self.mass_delta, axis=0)

    def bands(self, level: Optional[float] = None):
        level = self.level if level is None else level
        lo = (1.0 - level) / 2.0
        return (np.quantile(self.mass_delta, lo, axis=0), np.quantile(self.mass_delta, 1.0 - lo, axis=0))

    def integrals(self) -> np.ndarray:
        return self.mass_delta.sum(axis=-1) * self.grid.cell_volume


def zero_exclusion_mask(firf_: Firf, level: Optional[float] = None) -> np.ndarray:
    """``(n_horizons, N_grid)`` mask, true where the central interval excludes zero."""
    if level is not None and not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    lo, hi = firf_.bands(level)
    return (lo > 0) | (hi < 0)


def firf(irf_draws_: Irf, loading: LoadingSet, steady_state_scores_, grid: GridSpec, n_y: int,
         horizons: Sequence[int] = DEFAULT_HORIZONS, level: float = FIRF_LEVEL,
         max_draws: Optional[int] = None) -> Firf:
    """Density-mass change after the shock relative to the steady state.

    For each draw and horizon the CLR field ``mean + H (beta_bar + dbeta_h)`` is
    mapped to a density and the steady-state density
    ``inverse_clr(mean + H beta_bar)`` is subtracted. ``max_draws`` thins the
    draws evenly to bound memory.
    """
    R = irf_draws_.responses
    K = loading.K
    if R.shape[2] - n_y != K:
        raise ShapeError(f"factor block has {R.shape[2] - n_y} columns, loading rank is {K}")
    if loading.flat_H.shape[0] != grid.size:
        raise ShapeError("loading rows do not match the grid size")
    horizons = tuple(int(h) for h in horizons)
    if min(horizons) < 0 or max(horizons) > irf_draws_.Hmax:
        raise ValueError("requested horizons exceed the IRF horizon")
    idx = np.arange(R.shape[0])
    if max_draws is not None and R.shape[0] > max_draws:
        idx = np.unique(np.linspace(0, R.shape[0] - 1, max_draws).round().astype(int))

    beta_bar = np.asarray(steady_state_scores_, dtype=float).reshape(K)
    base_clr = loading.mean + loading.flat_H @ beta_bar
    ss = _densities(base_clr[:, None], grid)[:, 0]
    out = np.empty((idx.size, len(horizons), grid.size))
    for j, h in enumerate(horizons):
        dB = R[idx, h, n_y:]
        clr_h = base_clr[:, None] + loading.flat_H @ dB.T
        out[:, j, :] = (_densities(clr_h, grid) - ss[:, None]).T
    steady = DensityField(grid, ss.reshape(grid.shape, order="F"))
    return Firf(grid, horizons, out, steady, level)


def _densities(clr_cols: np.ndarray, grid: GridSpec) -> np.ndarray:
    # Column-wise inverse CLR on a node-major matrix.
    v = clr_cols - clr_cols.max(axis=0, keepdims=True)
    if not np.all(np.isfinite(v)):
        raise NumericalError("non-finite CLR field in functional response")
    f = np.exp(np.clip(v, -700.0, 700.0))
    return f / (f.sum(axis=0, keepdims=True) * grid.cell_volume)


def write_firf(directory, firf_: Firf, names=None, mask_level: Optional[float] = None) -> dict:
    """Per-horizon grid CSVs plus a manifest.

    For every horizon: the posterior-mean mass change (itself a mass-delta
    field, integrating to zero), the pointwise median and quantiles, and the
    zero-exclusion mask.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    mask = zero_exclusion_mask(firf_, mask_level)
    qs = {q: np.quantile(firf_.mass_delta, q, axis=0) for q in firf_.quantiles}
    files = []
    for j, h in enumerate(firf_.horizons):
        items = [("mean", firf_.mass_delta[:, j].mean(axis=0)), ("median", np.median(firf_.mass_delta[:, j], axis=0))]
        items += [(f"q{q:.4f}".rstrip("0").rstrip("."), qs[q][j]) for q in firf_.quantiles]
        items.append(("mask", mask[j].astype(float)))
        for label, vec in items:
            name = f"firf_h{h:03d}_{label}.csv"
            _write_grid(d / name, firf_.grid, firf_.field(vec), names)
            files.append(name)
    _write_grid(d / "steady_state.csv", firf_.grid, firf_.steady_state.values, names)
    manifest = {
        "horizons": list(firf_.horizons),
        "quantiles": [repr(float(q)) for q in firf_.quantiles],
        "mask_level": repr(float(firf_.level if mask_level is None else mask_level)),
        "n_draws": int(firf_.mass_delta.shape[0]),
        "files": files,
        "max_abs_integral": repr(float(np.max(np.abs(firf_.integrals())))),
    }
    (d / "firf_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _write_grid(path, grid, values, names=None):
    write_field_csv(path, _RawField(grid, np.asarray(values, dtype=float)), names)


@dataclass
class _RawField:
    grid: GridSpec
    values: np.ndarray = field(repr=False)
