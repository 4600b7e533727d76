"""Time integration of projected stochastic Navier-Stokes at viscosity eps.

The stepper is semi-implicit: the Stokes part uses the exact Fourier
integrating factor exp(-eps |k|^2 dt), transport and noise are explicit
Euler-Maruyama, and the state stays divergence-free because every additive
term is projected.  Every quantity entering the pathwise energy budget is
tracked per step:

    E_n   kinetic energy 0.5 ||u||^2
    D_n   cumulative eps * int ||grad u||^2 (left-point quadrature)
    I_n   cumulative Ito input rate 0.5 ||Phi||_HS^2 * t
    M_n   cumulative discrete stochastic integral sum_k <u, Phi e_k> dW_k

The energy-inequality defect over [s, t] is G(t) - G(s) for the compensated
process G = E + D - I - M, which an admissible path keeps non-increasing up
to discretization noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .forcing import ForcingOperator, WienerPath, auxiliary_normals
from .spectral import (
    SpectralField,
    TorusGrid,
    _convective_with_sup,
    dealias,
    grad_norm_sq,
    kinetic_energy,
    laplacian_decay_factor,
    leray_project,
    single_mode,
    taylor_green,
)


class SolverError(RuntimeError):
    pass


class BlowUpError(SolverError):
    """Trajectory lost resolution; carries partial results for diagnosis."""

    def __init__(self, message, time=None, sup=None, partial=None):
        super().__init__(message)
        self.time = time
        self.sup = sup
        self.partial = partial


class CflError(SolverError):
    def __init__(self, message, time=None, sup=None, partial=None):
        super().__init__(message)
        self.time = time
        self.sup = sup
        self.partial = partial


@dataclass(frozen=True)
class InitialCondition:
    """Initial law: a named deterministic field or a random-phase spectrum.

    The random spectrum populates wavevectors with 0 < |k|_inf <= k_max
    with amplitudes amplitude * |k|^-decay and counter-based phases, so
    every p-th moment of the initial energy is finite and the draw is a
    pure function of (seed, path_id).
    """

    kind: str = "taylor_green"
    amplitude: float = 1.0
    k_max: int = 3
    decay: float = 2.0

    _KINDS = ("zero", "taylor_green", "single_mode", "random_spectrum")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise SolverError(f"unknown initial condition kind {self.kind!r}")

    def sample(self, grid: TorusGrid, seed: int, path_id: int) -> SpectralField:
        if self.kind == "zero":
            return SpectralField.zero(grid)
        if self.kind == "taylor_green":
            return taylor_green(grid, self.amplitude)
        if self.kind == "single_mode":
            return single_mode(grid, self.amplitude)
        return self._random_spectrum(grid, seed, path_id)

    def _random_spectrum(self, grid: TorusGrid, seed: int, path_id: int) -> SpectralField:
        span = range(-self.k_max, self.k_max + 1)
        if grid.dim == 2:
            wavevectors = [(a, b) for a in span for b in span]
        else:
            wavevectors = [(a, b, c) for a in span for b in span for c in span]
        wavevectors = [k for k in wavevectors if any(k)]
        limit = min(grid.dealias_cutoff(), grid.n // 2 - 1)
        draws = auxiliary_normals(seed, path_id, 0,
                                  len(wavevectors) * 2 * (grid.dim + 1))
        draws = draws.reshape(len(wavevectors), 2, grid.dim + 1)
        modes = {}
        for i, k in enumerate(wavevectors):
            if any(abs(q) > limit for q in k):
                continue
            kvec = np.asarray(k, dtype=float)
            knorm = float(np.linalg.norm(kvec))
            re, im = draws[i, 0], draws[i, 1]
            vec = (re[: grid.dim] + 1j * im[: grid.dim])
            # force the direction transverse to k; fall back to a fixed
            # rotation if the draw is (numerically) parallel
            vec = vec - kvec * (kvec @ vec) / (knorm ** 2)
            if np.linalg.norm(vec) < 1e-12:
                alt = np.zeros(grid.dim)
                alt[int(np.argmin(np.abs(kvec)))] = 1.0
                vec = alt - kvec * (kvec @ alt) / knorm ** 2
            vec = vec / np.linalg.norm(vec)
            amp = self.amplitude * knorm ** (-self.decay)
            phase = np.exp(1j * np.arctan2(im[grid.dim], re[grid.dim]))
            modes[k] = 0.5 * amp * phase * vec
        return leray_project(SpectralField.from_modes(grid, modes))


@dataclass(frozen=True)
class SolverConfig:
    grid: TorusGrid
    forcing: ForcingOperator | None
    eps: float
    dt: float
    horizon: float
    initial: InitialCondition = field(default_factory=InitialCondition)
    blowup_ceiling: float = 1e3
    cfl_number: float = 0.5
    transport: bool = True

    def __post_init__(self):
        if self.dt <= 0:
            raise SolverError("dt must be positive")
        if self.eps < 0:
            raise SolverError("viscosity must be >= 0")
        if self.horizon < 0:
            raise SolverError("horizon must be >= 0")
        if self.forcing is not None:
            self.forcing.check_resolved(self.grid)

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def rank(self) -> int:
        return self.forcing.rank if self.forcing is not None else 0

    def with_eps(self, eps: float) -> "SolverConfig":
        return replace(self, eps=eps)


@dataclass
class EnergyTrace:
    """Pathwise energy budget sampled at every grid time."""

    times: np.ndarray
    energy: np.ndarray
    dissipation: np.ndarray
    ito_input: np.ndarray
    stochastic: np.ndarray
    initial_energy: float

    def compensated(self) -> np.ndarray:
        """G = E + D - I - M; non-increasing for admissible paths."""
        return self.energy + self.dissipation - self.ito_input - self.stochastic

    def defect(self, s: float, t: float) -> float:
        """Energy-inequality defect over [s, t]; <= 0 means admissible."""
        si, ti = self._index(s), self._index(t)
        if si >= ti:
            raise SolverError(f"need s < t on the trace grid, got {s}, {t}")
        g = self.compensated()
        return float(g[ti] - g[si])

    def defect_series(self) -> np.ndarray:
        """defect(0, t_n) for every grid time."""
        g = self.compensated()
        return g - g[0]

    def max_positive_defect(self) -> float:
        """max over all grid pairs s < t of defect(s, t), floored at 0."""
        g = self.compensated()
        running_min = np.minimum.accumulate(g[:-1])
        return float(max(0.0, np.max(g[1:] - running_min)))

    def tolerance(self, c: float = 1.0) -> float:
        dt = float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0
        return c * np.sqrt(dt) * (1.0 + self.initial_energy)

    def _index(self, t: float) -> int:
        if len(self.times) < 2:
            raise SolverError("trace holds a single entry; no time pairs exist")
        idx = int(round((t - self.times[0]) / (self.times[1] - self.times[0])))
        if idx < 0 or idx >= len(self.times) or abs(self.times[idx] - t) > 1e-9:
            raise SolverError(f"time {t} is not on the trace grid")
        return idx

    def write_csv(self, path) -> None:
        defects = self.defect_series()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "E", "D", "I", "M", "defect"])
            for i in range(len(self.times)):
                w.writerow([repr(float(self.times[i])),
                            repr(float(self.energy[i])),
                            repr(float(self.dissipation[i])),
                            repr(float(self.ito_input[i])),
                            repr(float(self.stochastic[i])),
                            repr(float(defects[i]))])


@dataclass(frozen=True)
class Trajectory:
    """Physical-space snapshots of one run at selected grid times."""

    grid: TorusGrid
    times: np.ndarray
    values: np.ndarray  # (n_snapshots, dim) + grid.shape

    def __post_init__(self):
        self.values.setflags(write=False)
        self.times.setflags(write=False)

    @property
    def n_snapshots(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class SolverRun:
    config: SolverConfig
    trace: EnergyTrace
    snapshots: tuple          # SpectralField at snapshot_times
    snapshot_times: np.ndarray
    final: SpectralField

    def trajectory(self) -> Trajectory:
        vals = np.stack([f.to_physical() for f in self.snapshots])
        return Trajectory(self.config.grid, np.asarray(self.snapshot_times), vals)


def step(u: SpectralField, dw: np.ndarray, cfg: SolverConfig) -> SpectralField:
    """One Euler-Maruyama step with exact viscous integrating factor."""
    new, _ = _step_with_sup(u, dw, cfg, None)
    return new


def _step_with_sup(u, dw, cfg, basis):
    grid = cfg.grid
    if cfg.transport:
        conv, sup = _convective_with_sup(u)
        drift = u.coeffs + cfg.dt * conv.coeffs
    else:
        sup = 0.0
        drift = u.coeffs
    if cfg.forcing is not None:
        if basis is None:
            basis = cfg.forcing.noise_basis(grid)
        drift = drift + np.tensordot(np.asarray(dw, dtype=np.float64), basis,
                                     axes=(0, 0))
    if cfg.eps > 0:
        drift = drift * laplacian_decay_factor(grid, cfg.eps, cfg.dt)
    return SpectralField(grid, drift), sup


def run_path(cfg: SolverConfig, seed: int, path_id: int,
             path: WienerPath | None = None,
             snapshot_times=None, observers=()) -> SolverRun:
    """Integrate one trajectory; deterministic given (cfg, seed, path_id).

    A pre-sampled ``path`` (e.g. shared across viscosities or refined by
    Brownian bridge) overrides local sampling; its dt must match cfg.
    Observers receive (step_index, time, field) at every recorded state.
    """
    grid = cfg.grid
    steps = cfg.steps
    if cfg.forcing is not None:
        if path is None:
            path = WienerPath.sample(seed, path_id, cfg.forcing.rank, cfg.dt, steps)
        if abs(path.dt - cfg.dt) > 1e-12 * cfg.dt:
            raise SolverError(f"path dt {path.dt} does not match config dt {cfg.dt}")
        if path.steps < steps:
            raise SolverError("Wiener path shorter than the run horizon")
        basis = cfg.forcing.noise_basis(grid)
        hs2 = cfg.forcing.hs_norm_sq()
    else:
        basis, hs2 = None, 0.0

    u = dealias(leray_project(cfg.initial.sample(grid, seed, path_id)))
    e0 = kinetic_energy(u)

    times = np.arange(steps + 1) * cfg.dt
    energy = np.empty(steps + 1)
    dissipation = np.zeros(steps + 1)
    ito_input = 0.5 * hs2 * times
    stochastic = np.zeros(steps + 1)

    want = _snapshot_index_set(snapshot_times, times)
    snaps, snap_times = [], []

    vol_scale = grid.volume / grid.n ** (2 * grid.dim)
    for n in range(steps + 1):
        energy[n] = kinetic_energy(u)
        if n in want:
            snaps.append(u)
            snap_times.append(times[n])
        for obs in observers:
            obs.on_state(n, times[n], u)
        if n == steps:
            break
        if cfg.eps > 0:
            dissipation[n + 1] = dissipation[n] + cfg.eps * cfg.dt * grad_norm_sq(u)
        if cfg.forcing is not None:
            dw = path.increments[n]
            axes = tuple(range(grid.dim + 1))
            pair = np.tensordot(np.conj(basis), u.coeffs,
                                axes=(tuple(a + 1 for a in axes), axes)).real * vol_scale
            stochastic[n + 1] = stochastic[n] + float(pair @ dw)
        else:
            dw = None
        u, sup = _step_with_sup(u, dw, cfg, basis)
        if cfg.transport:
            if sup > cfg.blowup_ceiling or (
                    sup > 0 and cfg.dt > cfg.cfl_number * grid.dx / sup):
                partial = EnergyTrace(times[: n + 1], energy[: n + 1],
                                      dissipation[: n + 1], ito_input[: n + 1],
                                      stochastic[: n + 1], e0)
                if sup > cfg.blowup_ceiling:
                    raise BlowUpError(
                        f"sup |u| = {sup:.3e} exceeded ceiling at t = {times[n + 1]:.4f}",
                        time=times[n + 1], sup=sup, partial=partial)
                raise CflError(
                    f"CFL violated at t = {times[n + 1]:.4f}: "
                    f"dt = {cfg.dt:.3e} > {cfg.cfl_number} dx / {sup:.3e}",
                    time=times[n + 1], sup=sup, partial=partial)

    trace = EnergyTrace(times, energy, dissipation, ito_input, stochastic, e0)
    return SolverRun(cfg, trace, tuple(snaps), np.asarray(snap_times), u)


def _snapshot_index_set(snapshot_times, times) -> set:
    if snapshot_times is None:
        return set(range(len(times)))
    dt = times[1] - times[0] if len(times) > 1 else 1.0
    out = set()
    for t in snapshot_times:
        idx = int(round(t / dt))
        if idx < 0 or idx >= len(times) or abs(times[idx] - t) > 1e-9:
            raise SolverError(f"snapshot time {t} is not on the step grid")
        out.add(idx)
    return out


# -- ensemble moment monitor ----------------------------------------------


def apriori_moment_report(traces_by_eps: dict, p: float, z: float = 1.96) -> dict:
    """Monte Carlo check that E[(sup_t E_t + eps int ||grad u||^2)^p] is
    uniform along the viscosity ladder (non-increasing within CI).

    ``traces_by_eps`` maps eps -> list of EnergyTrace with shared noise
    seeds across entries.  Requires p > 2 to match the moment assumption on
    the initial law.
    """
    if p <= 2:
        raise SolverError("moment order p must exceed 2")
    if not traces_by_eps:
        raise SolverError("empty ensemble")
    rows = []
    for eps in sorted(traces_by_eps, reverse=True):
        traces = traces_by_eps[eps]
        if len(traces) == 0:
            raise SolverError(f"empty ensemble for eps={eps}")
        x = np.array([
            (float(np.max(tr.energy)) + float(tr.dissipation[-1])) ** p
            for tr in traces])
        n = len(x)
        se = float(x.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        rows.append({"eps": eps, "paths": n, "moment": float(x.mean()),
                     "se": se, "ci_half": z * se})
    monotone = True
    for a, b in zip(rows, rows[1:]):
        slack = np.hypot(a["ci_half"], b["ci_half"])
        if b["moment"] > a["moment"] + slack:
            monotone = False
    return {"p": p, "rows": rows, "uniform_in_eps": monotone}
