"""Vanishing-viscosity harness and martingale-identification statistics.

A viscosity ladder runs the solver at a strictly decreasing sequence of
viscosities with one bit-identical Wiener path per ensemble member.  The
family of trajectories feeds the Young-measure estimator; weak* Cauchy
distances between successive rungs stand in for subsequence extraction,
since no finite computation can exhibit the limit object itself.

The martingale side checks that the path functional

    M_t = <u(t) - u(0), phi> - eps int <u, lap phi> - int <nu, xi x xi> : grad phi
          (- concentration term)

behaves like the stochastic integral it must equal: zero conditional
increments, quadratic variation N_t = sum_k <Phi e_k, phi>^2 t, and cross
variation N^k_t = <Phi e_k, phi> t against the k-th Wiener coordinate, all
tested against history weights h evaluated at the earlier time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .forcing import ForcingOperator, WienerPath
from .solver import BlowUpError, SolverConfig, Trajectory, run_path
from .spectral import (
    SpectralField,
    gradient_physical,
    inner_product,
)
from .young import (
    CellPartition,
    GeneralizedYoungMeasure,
    barycenter,
    estimate_from_family,
    slab_energies,
    weakstar_distance,
)


class LimitError(ValueError):
    pass


# -- ladder ----------------------------------------------------------------


@dataclass(frozen=True)
class ViscosityLadder:
    eps_values: tuple
    base: SolverConfig
    seed: int
    path_ids: tuple = (0,)

    def __post_init__(self):
        eps = tuple(float(e) for e in self.eps_values)
        if len(eps) < 1 or any(e <= 0 for e in eps):
            raise LimitError("ladder viscosities must be positive")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise LimitError("ladder must be strictly decreasing")
        object.__setattr__(self, "eps_values", eps)
        object.__setattr__(self, "path_ids", tuple(int(p) for p in self.path_ids))


@dataclass
class LadderResult:
    ladder: ViscosityLadder
    runs: dict                     # eps -> list of SolverRun
    measures: dict                 # eps -> pooled GeneralizedYoungMeasure
    family: GeneralizedYoungMeasure
    cauchy_distances: list         # successive weak* distances
    barycenter_defect: float       # max |barycenter - cell average| over eps
    blowups: dict                  # eps -> list of (path_id, message)

    @property
    def finest_eps(self) -> float:
        return self.ladder.eps_values[-1]


def run_ladder(ladder: ViscosityLadder, partition: CellPartition,
               radius: float, snapshot_times=None, bins_per_axis: int = 16,
               sphere_bins: int = 32, threads: int = 1) -> LadderResult:
    """Run every rung on shared noise and estimate the family measure.

    The family measure pools the tail (last half) of the ladder; per-rung
    measures pool the ensemble at that viscosity.  Blow-ups abort a single
    (eps, path) job and the ladder continues without it.  (eps, path) jobs
    are independent; with threads > 1 they run on a pool and are reduced in
    fixed key order, so results never depend on the worker count.
    """
    base = ladder.base
    if snapshot_times is None:
        snapshot_times = _default_snapshots(partition, base.dt)
    paths = {
        pid: WienerPath.sample(ladder.seed, pid, base.rank, base.dt, base.steps)
        for pid in ladder.path_ids
    } if base.forcing is not None else {pid: None for pid in ladder.path_ids}

    def job(eps, pid):
        try:
            return run_path(base.with_eps(eps), ladder.seed, pid,
                            path=paths[pid], snapshot_times=snapshot_times), None
        except BlowUpError as err:
            return None, err

    keys = [(eps, pid) for eps in ladder.eps_values for pid in ladder.path_ids]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {key: pool.submit(job, *key) for key in keys}
            results = {key: futures[key].result() for key in keys}
    else:
        results = {key: job(*key) for key in keys}

    runs, blowups = {}, {}
    for eps in ladder.eps_values:
        good = []
        for pid in ladder.path_ids:
            run, err = results[(eps, pid)]
            if err is not None:
                blowups.setdefault(eps, []).append((pid, str(err)))
            else:
                good.append(run)
        runs[eps] = good

    measures = {}
    bary_defect = 0.0
    for eps, eps_runs in runs.items():
        if not eps_runs:
            continue
        trajs = [r.trajectory() for r in eps_runs]
        measures[eps] = estimate_from_family(
            trajs, partition, radius, bins_per_axis, sphere_bins)
        if len(trajs) == 1:
            bary_defect = max(bary_defect,
                              _barycenter_defect(measures[eps], trajs[0], partition))

    usable = [eps for eps in ladder.eps_values if eps in measures]
    tail = usable[len(usable) // 2:]
    family_trajs = [r.trajectory() for eps in tail for r in runs[eps]]
    family = estimate_from_family(family_trajs, partition, radius,
                                  bins_per_axis, sphere_bins)

    distances = [weakstar_distance(measures[a], measures[b])
                 for a, b in zip(usable, usable[1:])]
    return LadderResult(ladder, runs, measures, family, distances,
                        bary_defect, blowups)


def _default_snapshots(partition: CellPartition, dt: float):
    """Four sample times per slab, snapped onto the step grid."""
    out = []
    for s in range(partition.n_t):
        lo = partition.t0 + s * partition.slab_duration
        for frac in (0.125, 0.375, 0.625, 0.875):
            t = lo + frac * partition.slab_duration
            out.append(round(t / dt) * dt)
    return sorted(set(out))


def _barycenter_defect(V, traj, partition) -> float:
    bary = barycenter(V)
    space_idx = partition.space_cell_index()
    worst = 0.0
    vals = traj.values.reshape(traj.n_snapshots, traj.grid.dim, -1)
    slabs = np.array([partition.slab_of(float(t)) for t in traj.times])
    for s in range(partition.n_t):
        sel = slabs == s
        if not sel.any():
            continue
        v = vals[sel]
        for cell in range(partition.n_space):
            pts = space_idx == cell
            avg = v[:, :, pts].mean(axis=(0, 2))
            worst = max(worst, float(np.max(np.abs(
                bary[s * partition.n_space + cell] - avg))))
    return worst


# -- momentum residual ------------------------------------------------------


def forcing_pairings(phi: SpectralField, forcing: ForcingOperator) -> np.ndarray:
    """<sigma_k g_k, phi> for every forcing mode."""
    grid = phi.grid
    return np.array([
        forcing.modes[k].sigma * inner_product(forcing.mode_field(grid, k), phi)
        for k in range(forcing.rank)])


def momentum_residual(V: GeneralizedYoungMeasure, traj: Trajectory,
                      forcing: ForcingOperator | None, path: WienerPath | None,
                      phi: SpectralField, t: float, eps: float = 0.0) -> dict:
    """Absolute residual of the weak momentum balance up to time t.

    All convective terms are measure pairings (sample-exact when V retains
    its source trajectory); the stochastic integral uses the exact mode
    pairings times the Wiener coordinates.  The viscous contribution for
    eps > 0 runs is reported separately.  t must be a slab boundary of V's
    partition.
    """
    part = V.partition
    ratio = (t - part.t0) / part.slab_duration
    n_slabs = int(round(ratio))
    if abs(ratio - n_slabs) > 1e-9 or not 0 <= n_slabs <= part.n_t:
        raise LimitError(f"t={t} is not a slab boundary of the partition")

    u_t = _snapshot_at(traj, t)
    u_0 = _snapshot_at(traj, part.t0)
    drift = inner_product(u_t, phi) - inner_product(u_0, phi)

    grad_phi = gradient_physical(phi)
    convective = _windowed_tensor_pairing(V, traj, grad_phi, n_slabs)

    stochastic = 0.0
    if forcing is not None and path is not None:
        c = forcing_pairings(phi, forcing)
        n = int(round((t - part.t0) / path.dt))
        beta = path.increments[:n].sum(axis=0)
        stochastic = float(c @ beta)

    viscous = 0.0
    if eps > 0:
        lap_phi = SpectralField(phi.grid, -phi.grid.k_squared() * phi.coeffs)
        viscous = eps * _windowed_scalar_pairing(traj, lap_phi, part, n_slabs)

    residual = drift - convective - stochastic - viscous
    return {"residual": abs(residual), "drift": drift, "convective": convective,
            "stochastic": stochastic, "viscous": viscous}


def _snapshot_at(traj: Trajectory, t: float) -> SpectralField:
    idx = int(np.argmin(np.abs(traj.times - t)))
    if abs(traj.times[idx] - t) > 1e-9:
        raise LimitError(f"trajectory has no snapshot at t={t}")
    return SpectralField.from_physical(traj.grid, traj.values[idx])


def _left_point_weights(times: np.ndarray, t_end: float) -> np.ndarray:
    """Left-point quadrature weights on [times[0], t_end] per sample."""
    w = np.zeros(len(times))
    for m, tm in enumerate(times):
        if tm >= t_end - 1e-12:
            continue
        t_next = times[m + 1] if m + 1 < len(times) else t_end
        w[m] = min(float(t_next), t_end) - float(tm)
    return w


def _windowed_tensor_pairing(V, traj, grad_phi, n_slabs) -> float:
    """int_0^t [<nu, xi x xi> + <nu_inf, xi x xi> dlam] : grad phi.

    Uses the source samples when available (pointwise in x with left-point
    time weights, so the discrete weak form of the scheme cancels exactly),
    otherwise the cell moments with cell-averaged grad phi.
    """
    part = V.partition
    dim = part.dim
    if V.source is not None:
        src = V.source
        gp = grad_phi.reshape(dim, dim, -1)
        t_end = part.t0 + n_slabs * part.slab_duration
        weights = _left_point_weights(np.asarray(src.times, dtype=float), t_end)
        total = 0.0
        npts = int(np.prod(src.values.shape[2:]))
        for m in range(src.n_snapshots):
            if weights[m] == 0.0:
                continue
            v = src.values[m].reshape(dim, -1)
            acc = 0.0
            for i in range(dim):
                for j in range(dim):
                    acc += float(np.dot(v[i] * v[j], gp[i, j]))
            total += acc * weights[m] * (2 * np.pi) ** dim / npts
        return total

    # cell-moment route with grad phi averaged per space cell
    space_idx = part.space_cell_index()
    gp = grad_phi.reshape(dim, dim, -1)
    gp_cell = np.zeros((part.n_space, dim, dim))
    for i in range(dim):
        for j in range(dim):
            sums = np.bincount(space_idx, weights=gp[i, j], minlength=part.n_space)
            cnts = np.bincount(space_idx, minlength=part.n_space)
            gp_cell[:, i, j] = sums / cnts
    total = 0.0
    for s in range(n_slabs):
        lo = s * part.n_space
        hi = lo + part.n_space
        osc = np.einsum("cb,cbij->cij", V.nu_mass[lo:hi], V.nu_sec[lo:hi])
        total += float(np.einsum("cij,cij->", osc, gp_cell)) * part.cell_volume
        conc = np.einsum("cb,cbij->cij", V.inf_mass[lo:hi], V.inf_sec[lo:hi])
        total += float(np.einsum("cij,cij->",
                                 conc * V.lam_mass[lo:hi, None, None], gp_cell))
    return total


def _windowed_scalar_pairing(traj, test_field, part, n_slabs) -> float:
    """int_0^t <u, test_field> with left-point weights on the sample times."""
    t_end = part.t0 + n_slabs * part.slab_duration
    weights = _left_point_weights(np.asarray(traj.times, dtype=float), t_end)
    total = 0.0
    for m in range(traj.n_snapshots):
        if weights[m] == 0.0:
            continue
        u = SpectralField.from_physical(traj.grid, traj.values[m])
        total += inner_product(u, test_field) * weights[m]
    return total


# -- martingale statistics ---------------------------------------------------


class FunctionalRecorder:
    """Observer accumulating the ingredients of M_t along one trajectory.

    Left-point quadrature in time matches the explicit scheme; the
    convective pairing reads <u x u, grad phi> pointwise on the grid.
    """

    def __init__(self, phi: SpectralField, eps: float, dt: float,
                 transport: bool = True):
        self.phi = phi
        self.eps = eps
        self.dt = dt
        self.transport = transport
        grid = phi.grid
        self._grad_phi = gradient_physical(phi).reshape(grid.dim, grid.dim, -1)
        self._lap_phi = SpectralField(grid, -grid.k_squared() * phi.coeffs)
        self._quad_w = grid.volume / grid.n ** grid.dim
        self.pairings = []
        self.visc_int = [0.0]
        self.conv_int = [0.0]

    def on_state(self, n, t, u):
        self.pairings.append(inner_product(u, self.phi))
        if self.transport:
            phys = u.to_physical().reshape(u.grid.dim, -1)
            conv = 0.0
            for i in range(u.grid.dim):
                for j in range(u.grid.dim):
                    conv += float(np.dot(phys[i] * phys[j], self._grad_phi[i, j]))
            conv *= self._quad_w
        else:
            conv = 0.0
        self.conv_int.append(self.conv_int[-1] + self.dt * conv)
        self.visc_int.append(self.visc_int[-1]
                             + self.dt * inner_product(u, self._lap_phi))

    def martingale_series(self) -> np.ndarray:
        p = np.asarray(self.pairings)
        nvals = len(p)
        visc = np.asarray(self.visc_int[:nvals])
        conv = np.asarray(self.conv_int[:nvals])
        return p - p[0] - self.eps * visc - conv


@dataclass(frozen=True)
class MartingaleStat:
    """One (phi, s, t) martingale test specification."""

    __test__ = False

    phi_name: str
    s: float
    t: float
    history: str = "one"   # one | clamp_pair | clamp_beta

    HISTORY_KINDS = ("one", "clamp_pair", "clamp_beta")

    def __post_init__(self):
        if not 0 <= self.s < self.t:
            raise LimitError("need 0 <= s < t")
        if self.history not in self.HISTORY_KINDS:
            raise LimitError(f"unknown history functional {self.history!r}")


@dataclass
class PathFunctionals:
    """Per-path values entering the martingale statistics."""

    m_s: float
    m_t: float
    beta_s: np.ndarray
    beta_t: np.ndarray
    pair_s: float          # <u(s), phi>, for the clamped history weight


def history_weight(stat: MartingaleStat, pf: PathFunctionals) -> float:
    if stat.history == "one":
        return 1.0
    if stat.history == "clamp_pair":
        return float(np.clip(pf.pair_s, -1.0, 1.0))
    return float(np.clip(pf.beta_s[0], -1.0, 1.0))


def martingale_test(stat: MartingaleStat, ensemble, c: np.ndarray,
                    n_tests: int = 1, alpha: float = 0.05) -> dict:
    """Monte Carlo check of the three martingale identities at (s, t).

    ``ensemble`` is a list of PathFunctionals from independent paths, ``c``
    the forcing pairings <Phi e_k, phi>.  Passes when zero lies in every
    Bonferroni-corrected confidence interval.
    """
    if len(ensemble) < 32:
        raise LimitError(f"ensemble of {len(ensemble)} is too small (need >= 32)")
    z = float(ndtri(1.0 - alpha / (2.0 * max(1, n_tests))))
    dt_span = stat.t - stat.s
    n_qv = float(np.sum(c ** 2)) * dt_span

    h = np.array([history_weight(stat, pf) for pf in ensemble])
    m_s = np.array([pf.m_s for pf in ensemble])
    m_t = np.array([pf.m_t for pf in ensemble])
    beta_s = np.stack([pf.beta_s for pf in ensemble])
    beta_t = np.stack([pf.beta_t for pf in ensemble])

    rows = []
    rows.append(_ci_row("increment", h * (m_t - m_s), z))
    rows.append(_ci_row("quadratic_variation",
                        h * (m_t ** 2 - m_s ** 2 - n_qv), z))
    for k in range(len(c)):
        cross = h * (m_t * beta_t[:, k] - m_s * beta_s[:, k] - c[k] * dt_span)
        rows.append(_ci_row(f"cross_variation_k{k}", cross, z))
    return {
        "stat": {"phi": stat.phi_name, "s": stat.s, "t": stat.t,
                 "history": stat.history},
        "z": z,
        "rows": rows,
        "passed": all(r["passed"] for r in rows),
    }


def _ci_row(name: str, samples: np.ndarray, z: float,
            atol: float = 1e-10) -> dict:
    n = len(samples)
    mean = float(samples.mean())
    se = float(samples.std(ddof=1) / np.sqrt(n))
    half = z * se
    return {"name": name, "mean": mean, "se": se, "ci_half": half,
            "passed": bool(abs(mean) <= half + atol)}


def linear_model_functionals(forcing: ForcingOperator, phi: SpectralField,
                             seed: int, path_ids, dt: float, steps: int,
                             s: float, t: float, u0_pairing: float = 0.0):
    """Exact transport-off functionals: M_t = sum_k c_k beta_k(t).

    With transport disabled and eps = 0 the stepper reduces to
    u(t) = u(0) + Phi W(t), so M computed from the trajectory side equals
    the stochastic integral identically; this fast path evaluates it from
    the increments alone.  Returns (ensemble, c).
    """
    by_pair, c = linear_model_functionals_multi(
        forcing, phi, seed, path_ids, dt, steps, [(s, t)], u0_pairing)
    return by_pair[(s, t)], c


def linear_model_functionals_multi(forcing: ForcingOperator,
                                   phi: SpectralField, seed: int, path_ids,
                                   dt: float, steps: int, pairs,
                                   u0_pairing: float = 0.0):
    """Transport-off functionals at several (s, t) pairs per path."""
    c = forcing_pairings(phi, forcing)
    idx = {(s, t): (int(round(s / dt)), int(round(t / dt))) for s, t in pairs}
    out = {key: [] for key in idx}
    for pid in path_ids:
        path = WienerPath.sample(seed, pid, forcing.rank, dt, steps)
        beta = path.coordinates()
        for key, (si, ti) in idx.items():
            m_s = float(c @ beta[si])
            m_t = float(c @ beta[ti])
            out[key].append(PathFunctionals(
                m_s=m_s, m_t=m_t, beta_s=beta[si].copy(),
                beta_t=beta[ti].copy(), pair_s=u0_pairing + m_s))
    return out, c


def solver_functionals(cfg: SolverConfig, phi: SpectralField, seed: int,
                       path_ids, s: float, t: float):
    """Full-model functionals via a recorder observer on each run."""
    by_pair, c = solver_functionals_multi(cfg, phi, seed, path_ids, [(s, t)])
    return by_pair[(s, t)], c


def solver_functionals_multi(cfg: SolverConfig, phi: SpectralField, seed: int,
                             path_ids, pairs):
    """Full-model functionals at several (s, t) pairs from one run per path."""
    idx = {(s, t): (int(round(s / cfg.dt)), int(round(t / cfg.dt)))
           for s, t in pairs}
    c = forcing_pairings(phi, cfg.forcing)
    out = {key: [] for key in idx}
    for pid in path_ids:
        path = WienerPath.sample(seed, pid, cfg.forcing.rank, cfg.dt, cfg.steps)
        rec = FunctionalRecorder(phi, cfg.eps, cfg.dt, transport=cfg.transport)
        run_path(cfg, seed, pid, path=path, snapshot_times=[], observers=(rec,))
        m = rec.martingale_series()
        beta = path.coordinates()
        for key, (si, ti) in idx.items():
            out[key].append(PathFunctionals(
                m_s=float(m[si]), m_t=float(m[ti]),
                beta_s=beta[si].copy(), beta_t=beta[ti].copy(),
                pair_s=rec.pairings[si]))
    return out, c


# -- limit energy inequality -------------------------------------------------


def energy_inequality_limit(family: GeneralizedYoungMeasure, traces,
                            forcing: ForcingOperator | None,
                            tol: float) -> dict:
    """Slab-averaged energy inequality audit for the family measure.

    Implements the mollified form: compare slab energies of the measure
    against the Ito input and the tail-averaged stochastic integral, then
    require the compensated slab process to be non-increasing within tol
    (energetic sinks allowed, no positive jumps).
    """
    part = family.partition
    e_slab = slab_energies(family)
    hs2 = forcing.hs_norm_sq() if forcing is not None else 0.0

    i_slab = np.zeros(part.n_t)
    m_slab = np.zeros(part.n_t)
    if traces:
        stacked_m = np.mean([tr.stochastic for tr in traces], axis=0)
        times = traces[0].times
        slabs = np.array([part.slab_of(float(x)) for x in times])
        for s in range(part.n_t):
            sel = slabs == s
            m_slab[s] = stacked_m[sel].mean()
            i_slab[s] = 0.5 * hs2 * times[sel].mean()

    g = e_slab - i_slab - m_slab
    defects = []
    for si in range(part.n_t):
        for ti in range(si + 1, part.n_t):
            defects.append({"s_slab": si, "t_slab": ti,
                            "defect": float(g[ti] - g[si])})
    max_defect = max((d["defect"] for d in defects), default=0.0)
    jumps = np.diff(g)
    max_jump = float(np.max(jumps)) if len(jumps) else 0.0
    return {
        "slab_energy": [float(x) for x in e_slab],
        "compensated": [float(x) for x in g],
        "defects": defects,
        "max_defect": float(max_defect),
        "max_positive_jump": max(0.0, max_jump),
        "tolerance": tol,
        "passed": bool(max_defect <= tol),
    }


# -- time regularity diagnostic ----------------------------------------------


def holder_seminorm(times: np.ndarray, values: np.ndarray,
                    alpha: float = 0.4) -> float:
    """Discrete C^alpha seminorm max |f(t) - f(s)| / |t - s|^alpha."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    worst = 0.0
    for i in range(len(times)):
        dt = times[i + 1:] - times[i]
        dv = np.abs(values[i + 1:] - values[i])
        if len(dt):
            worst = max(worst, float(np.max(dv / dt ** alpha)))
    return worst


def w32_normalize(phi: SpectralField) -> SpectralField:
    """Scale so the W^{3,2} norm is one; pairings then read in W^{-3,2}."""
    grid = phi.grid
    weight = (1.0 + grid.k_squared()) ** 3
    norm_sq = float(np.sum(weight * (np.abs(phi.coeffs) ** 2).sum(axis=0)))
    norm_sq *= grid.volume / grid.n ** (2 * grid.dim)
    if norm_sq == 0:
        raise LimitError("cannot normalize the zero field")
    return phi * (1.0 / np.sqrt(norm_sq))
