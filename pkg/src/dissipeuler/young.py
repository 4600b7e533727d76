"""Cell-discretized generalized Young measures.

A measure here is a triplet per space-time cell: an oscillation histogram
over the value ball |xi| <= R, a concentration mass (where |u|^2 escapes
the ball), and a concentration-angle histogram on the unit sphere.  Beyond
plain bin masses each bin stores the within-bin first and second moments of
the samples it received, so pairings against integrands that are
polynomials of degree <= 2 reproduce the underlying sample quadrature
exactly; general integrands are evaluated at bin centroids with an error
bounded by Lip(f) times the bin diameter.

The truncation radius R splits oscillation from concentration: the limit
object has no finite-sample definition, so the estimator assigns samples
with |u| <= R to the oscillation histogram and routes the quadrature-
weighted mass |u|^2 of the rest to the concentration part, with the
direction u/|u| binned on the sphere.  Cells whose oscillation histogram
would be empty get a unit mass at the origin bin so probability
normalization holds everywhere; such cells are flagged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .solver import Trajectory

TWO_PI = 2.0 * np.pi


class YoungMeasureError(ValueError):
    pass


@dataclass(frozen=True)
class CellPartition:
    """n_t time slabs times n_x^dim space cells over [t0, t1] x T^dim.

    Space cells are blocks of the sampling grid, so grid_n must be a
    multiple of n_x.
    """

    dim: int
    grid_n: int
    n_t: int
    n_x: int
    t0: float
    t1: float

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise YoungMeasureError("dim must be 2 or 3")
        if self.n_t < 1 or self.n_x < 1:
            raise YoungMeasureError("need at least one cell per direction")
        if self.grid_n % self.n_x != 0:
            raise YoungMeasureError(
                f"space cells ({self.n_x}) must divide the grid ({self.grid_n})")
        if not self.t1 > self.t0:
            raise YoungMeasureError("empty time interval")

    @property
    def n_space(self) -> int:
        return self.n_x ** self.dim

    @property
    def n_cells(self) -> int:
        return self.n_t * self.n_space

    @property
    def slab_duration(self) -> float:
        return (self.t1 - self.t0) / self.n_t

    @property
    def space_volume(self) -> float:
        return (TWO_PI / self.n_x) ** self.dim

    @property
    def cell_volume(self) -> float:
        """Space-time volume of one cell."""
        return self.space_volume * self.slab_duration

    @property
    def total_volume(self) -> float:
        return TWO_PI ** self.dim * (self.t1 - self.t0)

    def slab_of(self, t: float) -> int:
        s = int((t - self.t0) / self.slab_duration)
        return min(max(s, 0), self.n_t - 1)

    def space_cell_index(self) -> np.ndarray:
        """Flattened space-cell index for every grid point, shape (grid_n^dim,)."""
        block = self.grid_n // self.n_x
        idx1 = np.arange(self.grid_n) // block
        if self.dim == 2:
            cx, cy = np.meshgrid(idx1, idx1, indexing="ij")
            return (cx * self.n_x + cy).ravel()
        cx, cy, cz = np.meshgrid(idx1, idx1, idx1, indexing="ij")
        return ((cx * self.n_x + cy) * self.n_x + cz).ravel()

    def cell_centers(self):
        """(times, positions) of cell centers: (n_cells,), (n_cells, dim)."""
        ts = self.t0 + (np.arange(self.n_t) + 0.5) * self.slab_duration
        side = np.arange(self.n_x) + 0.5
        if self.dim == 2:
            gx, gy = np.meshgrid(side, side, indexing="ij")
            xs = np.stack([gx.ravel(), gy.ravel()], axis=1) * (TWO_PI / self.n_x)
        else:
            gx, gy, gz = np.meshgrid(side, side, side, indexing="ij")
            xs = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1) * (TWO_PI / self.n_x)
        times = np.repeat(ts, self.n_space)
        pos = np.tile(xs, (self.n_t, 1))
        return times, pos


@dataclass(frozen=True)
class TestIntegrand:
    """Integrand with quadratic growth plus its recession function.

    Quadratic integrands are declared by (A, b, c) meaning
    f(xi) = xi.A.xi + b.xi + c with recession xi.A.xi on the sphere; they
    pair exactly against the stored bin moments.  General integrands supply
    vectorized callables f and f_inf and pair through bin centroids.
    """

    __test__ = False  # not a pytest class

    name: str
    quad: tuple | None = None
    f: object = None
    f_inf: object = None

    def __post_init__(self):
        if self.quad is None and (self.f is None or self.f_inf is None):
            raise YoungMeasureError(
                f"integrand {self.name!r}: need quad coefficients or (f, f_inf)")
        if self.quad is not None:
            a, b, c = self.quad
            object.__setattr__(self, "quad",
                               (np.asarray(a, dtype=float), np.asarray(b, dtype=float),
                                float(c)))

    def eval(self, xi: np.ndarray) -> np.ndarray:
        if self.quad is not None:
            a, b, c = self.quad
            return np.einsum("...i,ij,...j->...", xi, a, xi) + xi @ b + c
        return self.f(xi)

    def eval_recession(self, unit: np.ndarray) -> np.ndarray:
        if self.quad is not None:
            a, _, _ = self.quad
            return np.einsum("...i,ij,...j->...", unit, a, unit)
        return self.f_inf(unit)


def g2_norm(integrand: TestIntegrand, dim: int, samples: int = 4001) -> float:
    """Numeric sup of (1 - |xi|)^2 |f(xi / (1 - |xi|))| over the unit ball.

    Finite exactly for quadratic-growth integrands; evaluated on radial
    rays through ray directions fixed per axis and diagonal.
    """
    rs = np.linspace(0.0, 1.0 - 1e-6, samples)
    dirs = list(np.eye(dim)) + [np.ones(dim) / np.sqrt(dim)]
    worst = 0.0
    for d in dirs:
        xi = rs[:, None] / (1.0 - rs[:, None]) * d[None, :]
        vals = (1.0 - rs) ** 2 * np.abs(integrand.eval(xi))
        worst = max(worst, float(np.max(vals)))
    return worst


@dataclass(frozen=True)
class GeneralizedYoungMeasure:
    partition: CellPartition
    radius: float
    bins_per_axis: int
    sphere_bins: int
    nu_mass: np.ndarray      # (n_cells, n_bins)
    nu_mean: np.ndarray      # (n_cells, n_bins, dim)
    nu_sec: np.ndarray       # (n_cells, n_bins, dim, dim)
    lam_mass: np.ndarray     # (n_cells,)
    inf_mass: np.ndarray     # (n_cells, sphere_bins)
    inf_mean: np.ndarray     # (n_cells, sphere_bins, dim)
    inf_sec: np.ndarray      # (n_cells, sphere_bins, dim, dim)
    clipped_fraction: float = 0.0
    empty_cells: int = 0
    source: Trajectory | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("nu_mass", "nu_mean", "nu_sec", "lam_mass",
                     "inf_mass", "inf_mean", "inf_sec"):
            getattr(self, name).setflags(write=False)

    @property
    def dim(self) -> int:
        return self.partition.dim

    def lam_total(self) -> float:
        return float(self.lam_mass.sum())

    def lam_t(self, slab: int) -> float:
        """Concentration mass of one slab normalized by its duration."""
        lo = slab * self.partition.n_space
        hi = lo + self.partition.n_space
        return float(self.lam_mass[lo:hi].sum()) / self.partition.slab_duration

    def second_moment(self) -> float:
        """Space-time integral of <nu, |xi|^2>; finite by construction."""
        tr = np.trace(self.nu_sec, axis1=2, axis2=3)
        return float((self.nu_mass * tr).sum() * self.partition.cell_volume)


# -- construction ----------------------------------------------------------


def _bin_of_values(values: np.ndarray, radius: float, bins: int) -> np.ndarray:
    """Flat histogram bin per row of values, shape (npts,)."""
    w = 2.0 * radius / bins
    idx = np.floor((values + radius) / w).astype(np.int64)
    np.clip(idx, 0, bins - 1, out=idx)
    flat = idx[:, 0]
    for axis in range(1, values.shape[1]):
        flat = flat * bins + idx[:, axis]
    return flat


def _sphere_bin(units: np.ndarray, sphere_bins: int, dim: int) -> np.ndarray:
    if dim == 2:
        theta = np.arctan2(units[:, 1], units[:, 0])
        idx = np.floor((theta + np.pi) / (TWO_PI / sphere_bins)).astype(np.int64)
        return np.clip(idx, 0, sphere_bins - 1)
    # 3D: equal-area latitude bands (uniform in cos theta) split in longitude
    n_lat = 4
    while sphere_bins % n_lat != 0:
        n_lat -= 1
    n_lon = sphere_bins // n_lat
    band = np.floor((units[:, 2] + 1.0) / 2.0 * n_lat).astype(np.int64)
    np.clip(band, 0, n_lat - 1, out=band)
    phi = np.arctan2(units[:, 1], units[:, 0])
    lon = np.floor((phi + np.pi) / (TWO_PI / n_lon)).astype(np.int64)
    np.clip(lon, 0, n_lon - 1, out=lon)
    return band * n_lon + lon


def _scatter(values: np.ndarray, flat_idx: np.ndarray, size: int,
             mass, sum_v, sum_vv, weights=None) -> None:
    dim = values.shape[1]
    w = np.ones(len(values)) if weights is None else weights
    mass += np.bincount(flat_idx, weights=w, minlength=size)
    for i in range(dim):
        sum_v[:, i] += np.bincount(flat_idx, weights=w * values[:, i], minlength=size)
        for j in range(i, dim):
            contrib = np.bincount(flat_idx, weights=w * values[:, i] * values[:, j],
                                  minlength=size)
            sum_vv[:, i, j] += contrib
            if i != j:
                sum_vv[:, j, i] += contrib


def _build(trajectories, partition: CellPartition, radius: float,
           bins_per_axis: int, sphere_bins: int, clip: bool,
           source=None) -> GeneralizedYoungMeasure:
    if radius <= 0:
        raise YoungMeasureError("truncation radius must be positive")
    dim = partition.dim
    n_cells = partition.n_cells
    n_bins = bins_per_axis ** dim

    nu_w = np.zeros(n_cells * n_bins)
    nu_v = np.zeros((n_cells * n_bins, dim))
    nu_vv = np.zeros((n_cells * n_bins, dim, dim))
    lam_w = np.zeros(n_cells * sphere_bins)
    lam_v = np.zeros((n_cells * sphere_bins, dim))
    lam_vv = np.zeros((n_cells * sphere_bins, dim, dim))
    samples_per_cell = np.zeros(n_cells)
    below_per_cell = np.zeros(n_cells)
    clipped = 0
    total = 0

    space_idx = partition.space_cell_index()
    for traj in trajectories:
        if traj.grid.n != partition.grid_n or traj.grid.dim != dim:
            raise YoungMeasureError("trajectory grid does not match partition")
        for m in range(traj.n_snapshots):
            t = float(traj.times[m])
            if t < partition.t0 - 1e-12 or t > partition.t1 + 1e-12:
                continue
            slab = partition.slab_of(t)
            cell = slab * partition.n_space + space_idx
            vals = traj.values[m].reshape(dim, -1).T  # (npts, dim)
            total += len(vals)
            samples_per_cell += np.bincount(cell, minlength=n_cells)

            if clip:
                over = np.abs(vals) > radius
                clipped += int(np.any(over, axis=1).sum())
                use = np.clip(vals, -radius * (1 - 1e-12), radius * (1 - 1e-12))
                below_per_cell += np.bincount(cell, minlength=n_cells)
                flat = cell * n_bins + _bin_of_values(use, radius, bins_per_axis)
                _scatter(use, flat, n_cells * n_bins, nu_w, nu_v, nu_vv)
            else:
                speed = np.sqrt((vals ** 2).sum(axis=1))
                below = speed <= radius
                if below.any():
                    vb = vals[below]
                    cb = cell[below]
                    below_per_cell += np.bincount(cb, minlength=n_cells)
                    flat = cb * n_bins + _bin_of_values(vb, radius, bins_per_axis)
                    _scatter(vb, flat, n_cells * n_bins, nu_w, nu_v, nu_vv)
                above = ~below
                if above.any():
                    va = vals[above]
                    ca = cell[above]
                    units = va / speed[above][:, None]
                    sb = _sphere_bin(units, sphere_bins, dim)
                    flat = ca * sphere_bins + sb
                    _scatter(units, flat, n_cells * sphere_bins, lam_w, lam_v,
                             lam_vv, weights=speed[above] ** 2)

    if total == 0:
        raise YoungMeasureError("no samples fall inside the partition window")
    if np.any(samples_per_cell == 0):
        raise YoungMeasureError(
            "partition has cells without samples; refine snapshots or coarsen")

    # oscillation part: normalize to per-cell probability, bin moments
    nu_w = nu_w.reshape(n_cells, n_bins)
    nu_v = nu_v.reshape(n_cells, n_bins, dim)
    nu_vv = nu_vv.reshape(n_cells, n_bins, dim, dim)
    occupied = nu_w > 0
    nu_mean = np.zeros_like(nu_v)
    nu_sec = np.zeros_like(nu_vv)
    np.divide(nu_v, nu_w[..., None], out=nu_mean, where=occupied[..., None])
    np.divide(nu_vv, nu_w[..., None, None], out=nu_sec,
              where=occupied[..., None, None])
    nu_mass = np.zeros_like(nu_w)
    has_below = below_per_cell > 0
    np.divide(nu_w, below_per_cell[:, None], out=nu_mass,
              where=has_below[:, None])
    # pure-concentration cells: probability lands on the origin bin
    empty_cells = int((~has_below).sum())
    if empty_cells:
        origin = np.zeros((1, dim))
        origin_bin = int(_bin_of_values(origin, radius, bins_per_axis)[0])
        nu_mass[~has_below, origin_bin] = 1.0

    # concentration part: quadrature weight per sample is cellvol / samples
    lam_w = lam_w.reshape(n_cells, sphere_bins)
    lam_v = lam_v.reshape(n_cells, sphere_bins, dim)
    lam_vv = lam_vv.reshape(n_cells, sphere_bins, dim, dim)
    cell_weight = partition.cell_volume / samples_per_cell
    lam_w = lam_w * cell_weight[:, None]
    lam_v = lam_v * cell_weight[:, None, None]
    lam_vv = lam_vv * cell_weight[:, None, None, None]
    lam_mass = lam_w.sum(axis=1)
    pos = lam_w > 0
    inf_mean = np.zeros_like(lam_v)
    inf_sec = np.zeros_like(lam_vv)
    np.divide(lam_v, lam_w[..., None], out=inf_mean, where=pos[..., None])
    np.divide(lam_vv, lam_w[..., None, None], out=inf_sec,
              where=pos[..., None, None])
    inf_mass = np.zeros_like(lam_w)
    has_lam = lam_mass > 0
    np.divide(lam_w, lam_mass[:, None], out=inf_mass, where=has_lam[:, None])

    return GeneralizedYoungMeasure(
        partition=partition, radius=radius, bins_per_axis=bins_per_axis,
        sphere_bins=sphere_bins, nu_mass=nu_mass, nu_mean=nu_mean,
        nu_sec=nu_sec, lam_mass=lam_mass, inf_mass=inf_mass,
        inf_mean=inf_mean, inf_sec=inf_sec,
        clipped_fraction=clipped / total, empty_cells=empty_cells,
        source=source)


def dirac_embed(traj: Trajectory, partition: CellPartition, radius: float,
                bins_per_axis: int = 16, sphere_bins: int = 32) -> GeneralizedYoungMeasure:
    """Embed one trajectory as (delta_u, 0, 0) on the cell partition.

    Values beyond the truncation radius are clipped into the edge bins and
    counted in ``clipped_fraction`` rather than feeding the concentration
    part, mirroring the embedding of square-integrable fields.
    """
    return _build([traj], partition, radius, bins_per_axis, sphere_bins,
                  clip=True, source=traj)


def estimate_from_family(family, partition: CellPartition, radius: float,
                         bins_per_axis: int = 16,
                         sphere_bins: int = 32) -> GeneralizedYoungMeasure:
    """Pooled oscillation/concentration estimator over a family of runs.

    Samples with |u| <= R populate the oscillation histograms; the rest
    contribute quadrature-weighted |u|^2 mass to the concentration measure
    and their directions to the sphere histogram.
    """
    family = list(family)
    if not family:
        raise YoungMeasureError("family must contain at least one trajectory")
    return _build(family, partition, radius, bins_per_axis, sphere_bins,
                  clip=False)


# -- pairings and reductions ----------------------------------------------


def pairing(V: GeneralizedYoungMeasure, f: TestIntegrand, phi=None) -> float:
    """Integral of phi(t,x) [<nu, f> dx dt + <nu_inf, f_inf> dlambda].

    phi is evaluated at cell centers (continuous weights only); quadratic
    integrands use the stored bin moments and are exact with respect to the
    underlying samples.
    """
    part = V.partition
    if phi is None:
        weights = np.ones(part.n_cells)
    else:
        tc, xc = part.cell_centers()
        weights = np.asarray(phi(tc, xc), dtype=float)

    if f.quad is not None:
        a, b, c = f.quad
        per_bin = (np.einsum("cbij,ij->cb", V.nu_sec, a)
                   + V.nu_mean @ b + c)
        per_bin_inf = np.einsum("cbij,ij->cb", V.inf_sec, a)
    else:
        per_bin = f.eval(V.nu_mean)
        per_bin_inf = f.eval_recession(V.inf_mean)

    osc_cell = (V.nu_mass * per_bin).sum(axis=1) * part.cell_volume
    conc_cell = (V.inf_mass * per_bin_inf).sum(axis=1) * V.lam_mass
    return float(weights @ (osc_cell + conc_cell))


def barycenter(V: GeneralizedYoungMeasure) -> np.ndarray:
    """Per-cell first moment of the oscillation part, shape (n_cells, dim)."""
    return np.einsum("cb,cbi->ci", V.nu_mass, V.nu_mean)


def energy_of(V: GeneralizedYoungMeasure, slab: int) -> float:
    """Slab kinetic energy 0.5 int <nu, |xi|^2> dx + 0.5 lambda_t(T^dim)."""
    part = V.partition
    if not 0 <= slab < part.n_t:
        raise YoungMeasureError(f"slab {slab} out of range")
    lo = slab * part.n_space
    hi = lo + part.n_space
    tr = np.trace(V.nu_sec[lo:hi], axis1=2, axis2=3)
    osc = (V.nu_mass[lo:hi] * tr).sum() * part.space_volume
    return 0.5 * float(osc) + 0.5 * V.lam_t(slab)


def slab_energies(V: GeneralizedYoungMeasure) -> np.ndarray:
    return np.array([energy_of(V, s) for s in range(V.partition.n_t)])


def quadratic_dictionary(dim: int):
    """Separating family: polynomials of degree <= 2 times trig weights.

    Returns a list of (TestIntegrand, phi, label); phi may be None for the
    constant weight.  At least 20 entries for every dim.
    """
    integrands = [TestIntegrand("one", quad=(np.zeros((dim, dim)), np.zeros(dim), 1.0))]
    for i in range(dim):
        b = np.zeros(dim)
        b[i] = 1.0
        integrands.append(TestIntegrand(f"xi{i}", quad=(np.zeros((dim, dim)), b, 0.0)))
    for i in range(dim):
        for j in range(i, dim):
            a = np.zeros((dim, dim))
            a[i, j] += 0.5
            a[j, i] += 0.5
            integrands.append(TestIntegrand(f"xi{i}xi{j}", quad=(a, np.zeros(dim), 0.0)))
    integrands.append(TestIntegrand("speed2", quad=(np.eye(dim), np.zeros(dim), 0.0)))

    weights = [(None, "1")]
    for axis in range(dim):
        weights.append((_trig_weight(axis, np.cos), f"cos_x{axis}"))
        weights.append((_trig_weight(axis, np.sin), f"sin_x{axis}"))

    out = []
    for f in integrands:
        for phi, wname in weights:
            out.append((f, phi, f"{f.name}*{wname}"))
    return out


def _trig_weight(axis: int, fn):
    def phi(t, x):
        return fn(x[:, axis])
    return phi


def weakstar_distance(V1: GeneralizedYoungMeasure, V2: GeneralizedYoungMeasure,
                      dictionary=None) -> float:
    """Max pairing discrepancy over a fixed separating dictionary."""
    if V1.partition != V2.partition:
        raise YoungMeasureError("measures live on different partitions")
    if dictionary is None:
        dictionary = quadratic_dictionary(V1.dim)
    worst = 0.0
    for f, phi, _ in dictionary:
        worst = max(worst, abs(pairing(V1, f, phi) - pairing(V2, f, phi)))
    return worst


# -- export ----------------------------------------------------------------


def measure_to_dict(V: GeneralizedYoungMeasure) -> dict:
    """JSON-ready description: partition, R, nonzero histogram entries."""
    part = V.partition
    cells, bins = np.nonzero(V.nu_mass)
    nu_entries = [
        [int(c), int(b), float(V.nu_mass[c, b]),
         [float(x) for x in V.nu_mean[c, b]],
         [float(x) for x in V.nu_sec[c, b].ravel()]]
        for c, b in zip(cells, bins)]
    cells, bins = np.nonzero(V.inf_mass)
    inf_entries = [
        [int(c), int(b), float(V.inf_mass[c, b]),
         [float(x) for x in V.inf_mean[c, b]]]
        for c, b in zip(cells, bins)]
    return {
        "partition": {
            "dim": part.dim, "grid_n": part.grid_n, "n_t": part.n_t,
            "n_x": part.n_x, "t0": part.t0, "t1": part.t1,
        },
        "radius": V.radius,
        "bins_per_axis": V.bins_per_axis,
        "sphere_bins": V.sphere_bins,
        "clipped_fraction": V.clipped_fraction,
        "empty_cells": V.empty_cells,
        "lambda_mass": [float(x) for x in V.lam_mass],
        "nu": nu_entries,
        "nu_inf": inf_entries,
        "dictionary": [label for _, _, label in quadratic_dictionary(part.dim)],
    }


def export_measure(path, V: GeneralizedYoungMeasure) -> None:
    with open(path, "w") as fh:
        json.dump(measure_to_dict(V), fh, sort_keys=True)
