"""
Per-period densities on a rectangular grid and their centered log-ratio.

A cross-section of micro observations is smoothed with a product Gaussian
kernel, evaluated at every node of a uniform grid, floored away from zero and
renormalized so that the Riemann sum times the cell volume is one. The CLR
transform subtracts the grid mean of the log density, which maps the
constrained density into an unconstrained field; ``inverse_clr`` maps back.

Array layout: a field on a grid with ``points_per_dim = (N_1, ..., N_d)`` is
stored as an ndarray of shape ``(N_1, ..., N_d)``. A ``ClrTensor`` appends the
time axis last, giving shape ``(N_1, ..., N_d, T)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import (
    DegenerateSampleError,
    DomainError,
    InvalidBandwidthError,
    RangeError,
    ShapeError,
)

DENSITY_FLOOR = 1e-12
EXP_CLIP = 700.0


@dataclass(frozen=True)
class GridSpec:
    """Uniform rectangular evaluation grid.

    Parameters
    ----------
    points_per_dim : sequence of int
        Number of nodes ``N_i`` along each micro variable, each at least 2.
    bounds_per_dim : sequence of (low, high)
        Closed interval covered along each dimension; the end points are nodes.
    """

    points_per_dim: tuple
    bounds_per_dim: tuple

    def __post_init__(self):
        pts = tuple(int(n) for n in self.points_per_dim)
        bnds = tuple((float(lo), float(hi)) for lo, hi in self.bounds_per_dim)
        if len(pts) == 0 or len(pts) != len(bnds):
            raise ShapeError("points_per_dim and bounds_per_dim must have equal, nonzero length")
        if any(n < 2 for n in pts):
            raise ShapeError(f"every dimension needs at least 2 grid points, got {pts}")
        if any(not (np.isfinite(lo) and np.isfinite(hi) and lo < hi) for lo, hi in bnds):
            raise ShapeError(f"bounds must be finite with low < high, got {bnds}")
        object.__setattr__(self, "points_per_dim", pts)
        object.__setattr__(self, "bounds_per_dim", bnds)

    @property
    def dims(self) -> int:
        return len(self.points_per_dim)

    @property
    def shape(self) -> tuple:
        return self.points_per_dim

    @property
    def size(self) -> int:
        return int(np.prod(self.points_per_dim))

    @property
    def axes(self) -> list:
        return [np.linspace(lo, hi, n) for n, (lo, hi) in zip(self.points_per_dim, self.bounds_per_dim)]

    @property
    def spacings(self) -> np.ndarray:
        return np.array([(hi - lo) / (n - 1) for n, (lo, hi) in zip(self.points_per_dim, self.bounds_per_dim)])

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacings))

    def nodes(self) -> np.ndarray:
        """All grid nodes as a ``(size, dims)`` array in row-major (C) order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def to_dict(self) -> dict:
        return {"points_per_dim": list(self.points_per_dim),
                "bounds_per_dim": [list(b) for b in self.bounds_per_dim]}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["points_per_dim"]), tuple(tuple(b) for b in d["bounds_per_dim"]))


@dataclass(frozen=True)
class DensityField:
    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise ShapeError(f"values shape {vals.shape} does not match grid {self.grid.shape}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def integral(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)


@dataclass(frozen=True)
class ClrField:
    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise ShapeError(f"values shape {vals.shape} does not match grid {self.grid.shape}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class ClrTensor:
    grid: GridSpec
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=float)
        if arr.shape[:-1] != self.grid.shape or arr.ndim != self.grid.dims + 1:
            raise ShapeError(f"tensor shape {arr.shape} incompatible with grid {self.grid.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def T(self) -> int:
        return self.data.shape[-1]

    def slice(self, t: int) -> ClrField:
        return ClrField(self.grid, self.data[..., t])

    def flat(self) -> np.ndarray:
        """Time-mode unfolding: ``N_grid x T`` with the first grid axis fastest."""
        return self.data.reshape(self.grid.size, self.T, order="F")


def silverman_bandwidths(sample: np.ndarray) -> np.ndarray:
    """Normal-reference bandwidth per dimension, ``sd * (4 / ((d + 2) n)) ** (1 / (d + 4))``."""
    sample = np.atleast_2d(np.asarray(sample, dtype=float))
    n, d = sample.shape
    if n < 2:
        raise DegenerateSampleError(f"need at least 2 observations, got {n}")
    sd = sample.std(axis=0, ddof=1)
    return sd * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


def _kernel_matrices(sample, axes, bandwidths):
    # One (N_i x n) Gaussian kernel matrix per dimension.
    mats = []
    for i, (ax, h) in enumerate(zip(axes, bandwidths)):
        z = (ax[:, None] - sample[None, :, i]) / h
        mats.append(np.exp(-0.5 * z * z) / (h * np.sqrt(2.0 * np.pi)))
    return mats


def kde_on_grid(sample, grid: GridSpec, bandwidths) -> np.ndarray:
    """Raw product-Gaussian kernel estimate at every grid node (no flooring)."""
    sample = np.atleast_2d(np.asarray(sample, dtype=float))
    n = sample.shape[0]
    mats = _kernel_matrices(sample, grid.axes, bandwidths)
    letters = "abcdefghijklmnopqrstuvwxy"[: grid.dims]
    spec = ",".join(f"{c}z" for c in letters) + "->" + letters
    # Chunk over observations to bound memory for large cross-sections.
    out = np.zeros(grid.shape)
    step = max(1, int(2e7 // max(grid.size, 1)))
    for start in range(0, n, step):
        out += np.einsum(spec, *[m[:, start:start + step] for m in mats], optimize=True)
    return out / n


def estimate_density(sample, grid: GridSpec, bandwidths=None) -> DensityField:
    """Kernel density estimate of one cross-section evaluated on ``grid``.

    Parameters
    ----------
    sample : array_like, shape (n_obs, dims)
    grid : GridSpec
    bandwidths : array_like, optional
        Per-dimension bandwidths; Silverman's normal-reference rule if omitted.

    Returns
    -------
    DensityField
        Floored at ``1e-12 * max`` and renormalized to integrate to one.
    """
    sample = np.asarray(sample, dtype=float)
    if sample.ndim == 1:
        sample = sample[:, None]
    if sample.ndim != 2 or sample.shape[1] != grid.dims:
        raise ShapeError(f"sample must be (n_obs, {grid.dims}), got {sample.shape}")
    if sample.shape[0] < 2:
        raise DegenerateSampleError(f"need at least 2 observations, got {sample.shape[0]}")
    if not np.all(np.isfinite(sample)):
        raise DomainError("sample contains non-finite entries")
    if bandwidths is None:
        bandwidths = silverman_bandwidths(sample)
        if np.any(bandwidths <= 0):
            raise DegenerateSampleError("bandwidth rule gives zero: sample has no spread in some dimension")
    bandwidths = np.broadcast_to(np.asarray(bandwidths, dtype=float), (grid.dims,))
    if np.any(~np.isfinite(bandwidths)) or np.any(bandwidths <= 0):
        raise InvalidBandwidthError(f"bandwidths must be positive, got {bandwidths}")

    f = kde_on_grid(sample, grid, bandwidths)
    peak = f.max()
    if not peak > 0:
        raise DegenerateSampleError("kernel estimate vanishes on the whole grid")
    f = np.maximum(f, DENSITY_FLOOR * peak)
    return DensityField(grid, f / (f.sum() * grid.cell_volume))


def normalize(values, grid: GridSpec) -> DensityField:
    """Floor and renormalize arbitrary nonnegative node values into a DensityField."""
    v = np.asarray(values, dtype=float)
    peak = v.max()
    if not peak > 0:
        raise DomainError("cannot normalize a field with no positive mass")
    v = np.maximum(v, DENSITY_FLOOR * peak)
    return DensityField(grid, v / (v.sum() * grid.cell_volume))


def clr(f: DensityField) -> ClrField:
    vals = f.values
    if np.any(~(vals > 0)):
        raise DomainError("clr requires strictly positive density values")
    logf = np.log(vals)
    return ClrField(f.grid, logf - logf.mean())


def inverse_clr(l: ClrField) -> DensityField:
    vals = np.asarray(l.values, dtype=float)
    if not np.all(np.isfinite(vals)):
        raise RangeError("inverse_clr requires finite values")
    # Shifting by the max is exact after renormalization and keeps exp in range.
    e = np.exp(np.clip(vals - vals.max(), -EXP_CLIP, EXP_CLIP))
    return DensityField(l.grid, e / (e.sum() * l.grid.cell_volume))


def build_tensor(fields: Sequence[ClrField]) -> ClrTensor:
    if len(fields) == 0:
        raise ShapeError("need at least one field")
    grid = fields[0].grid
    for t, f in enumerate(fields):
        if f.grid != grid:
            raise ShapeError(f"field {t} is on a different grid")
    return ClrTensor(grid, np.stack([f.values for f in fields], axis=-1))


def density_panel(samples, grid: GridSpec, bandwidths=None) -> ClrTensor:
    """KDE + CLR for each cross-section in ``samples`` and stack into a tensor."""
    return build_tensor([clr(estimate_density(s, grid, bandwidths)) for s in samples])


# -- CSV ---------------------------------------------------------------------

def write_field_csv(path, field_, names: Sequence[str] | None = None) -> None:
    """One row per node, row-major over dimensions: ``x1,...,xd,value``."""
    grid = field_.grid
    names = list(names) if names is not None else [f"x{i + 1}" for i in range(grid.dims)]
    nodes = grid.nodes()
    vals = np.asarray(field_.values).ravel(order="C")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names + ["value"])
        for node, v in zip(nodes, vals):
            w.writerow([repr(float(x)) for x in node] + [repr(float(v))])


def read_field_csv(path, grid: GridSpec, kind=DensityField):
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if arr.shape[0] != grid.size:
        raise ShapeError(f"{path}: expected {grid.size} rows, found {arr.shape[0]}")
    if not np.allclose(arr[:, :-1], grid.nodes(), rtol=0, atol=1e-9 * max(1.0, np.abs(arr[:, :-1]).max())):
        raise ShapeError(f"{path}: node coordinates do not match the grid")
    return kind(grid, arr[:, -1].reshape(grid.shape, order="C"))


def grid_from_sample(samples, points_per_dim, pad: float = 0.1) -> GridSpec:
    """Grid covering the pooled 0.5%-99.5% range of ``samples`` plus padding."""
    pooled = np.vstack([np.atleast_2d(np.asarray(s, dtype=float)) for s in samples])
    lo = np.quantile(pooled, 0.005, axis=0)
    hi = np.quantile(pooled, 0.995, axis=0)
    span = hi - lo
    pts = tuple(points_per_dim) if np.ndim(points_per_dim) else (int(points_per_dim),) * pooled.shape[1]
    return GridSpec(pts, tuple(zip(lo - pad * span, hi + pad * span)))


__all__ = [
    "GridSpec", "DensityField", "ClrField", "ClrTensor",
    "silverman_bandwidths", "kde_on_grid", "estimate_density", "normalize",
    "clr", "inverse_clr", "build_tensor", "density_panel",
    "write_field_csv", "read_field_csv", "grid_from_sample",
]
