"""Pathwise weak-strong uniqueness audit via the relative energy.

The "strong" solution is operationally a resolved reference: a run on a
finer grid with smaller dt, zero viscosity, and the same Wiener path
(Brownian-bridge refined), declared valid up to the first time its spectral
tail carries more than a configured energy fraction.  Against it the
relative energy

    F(t) = 0.5 int <nu, |xi - v|^2> dx + 0.5 lambda_t(T^dim)

is computed two ways per time slab: directly from the measure, and through
the expanded form E(t) + 0.5 ||v||^2 - <u, v>.  A Gronwall envelope
(F(0) + slack) exp(L t) with the stopping time tau_L (first time
||grad v||_inf exceeds L) closes the audit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forcing import WienerPath
from .solver import SolverConfig, SolverRun, Trajectory, run_path
from .spectral import (
    SpectralField,
    TorusGrid,
    gradient_physical,
    l2_norm_sq,
    resample,
    tail_energy_fraction,
)
from .young import (
    CellPartition,
    GeneralizedYoungMeasure,
    barycenter,
    dirac_embed,
    energy_of,
)


class WeakStrongError(ValueError):
    pass


@dataclass(frozen=True)
class StrongReference:
    """Resolved reference trajectory with its regularity traces."""

    traj: Trajectory
    grad_sup: np.ndarray       # ||grad v(t)||_inf at snapshot times
    energy_sq: np.ndarray      # ||v(t)||_{L^2}^2 at snapshot times
    horizon: float             # declared life span (resolution diagnostic)

    @property
    def grid(self) -> TorusGrid:
        return self.traj.grid

    def grad_sup_max(self) -> float:
        return float(np.max(self.grad_sup))


def build_reference(run: SolverRun, tail_tol: float = 1e-6) -> StrongReference:
    """Wrap a solver run as a strong reference.

    The horizon is the first snapshot time at which the dealias-band energy
    fraction exceeds tail_tol (the reference is no longer trusted as a
    classical solution there); otherwise the full run horizon.
    """
    if len(run.snapshots) == 0:
        raise WeakStrongError("reference run carries no snapshots")
    grad_sup = np.empty(len(run.snapshots))
    energy_sq = np.empty(len(run.snapshots))
    horizon = float(run.config.horizon)
    for i, f in enumerate(run.snapshots):
        tensor = gradient_physical(f)
        grad_sup[i] = float(np.sqrt((tensor ** 2).sum(axis=(0, 1)).max()))
        energy_sq[i] = l2_norm_sq(f)
        if tail_energy_fraction(f) > tail_tol and horizon >= run.snapshot_times[i]:
            horizon = float(run.snapshot_times[i])
    return StrongReference(run.trajectory(), grad_sup, energy_sq, horizon)


def stopping_time(ref: StrongReference, level: float) -> float:
    """First snapshot time with ||grad v||_inf > level, else the horizon."""
    if level <= 0:
        raise WeakStrongError("threshold must be positive")
    for t, g in zip(ref.traj.times, ref.grad_sup):
        if g > level and t <= ref.horizon:
            return float(t)
    return ref.horizon


# -- relative energy ---------------------------------------------------------


def _cell_average(ref: StrongReference, part: CellPartition,
                  slab: int) -> np.ndarray:
    """Reference velocity averaged over the slab's space cells, (n_space, dim)."""
    nf = ref.grid.n
    block = nf // part.n_x
    if block * part.n_x != nf:
        raise WeakStrongError("partition does not divide the reference grid")
    sel = [m for m, t in enumerate(ref.traj.times)
           if part.slab_of(float(t)) == slab]
    if not sel:
        raise WeakStrongError(f"reference has no snapshots in slab {slab}")
    dim = part.dim
    acc = np.zeros((part.n_x,) * dim + (dim,))
    for m in sel:
        v = ref.traj.values[m]
        if dim == 2:
            blocks = v.reshape(dim, part.n_x, block, part.n_x, block)
            acc += blocks.mean(axis=(2, 4)).transpose(1, 2, 0)
        else:
            blocks = v.reshape(dim, part.n_x, block, part.n_x, block,
                               part.n_x, block)
            acc += blocks.mean(axis=(2, 4, 6)).transpose(1, 2, 3, 0)
    return (acc / len(sel)).reshape(part.n_space, dim)


def relative_energy(V: GeneralizedYoungMeasure, ref: StrongReference,
                    slab: int) -> dict:
    """F on one slab, via the measure and via the expanded identity.

    measure form:  0.5 sum_cells <nu, |xi - v|^2> vol + 0.5 lambda_t
    expanded form: E_slab + 0.5 ||v||^2 - <barycenter, v>
    The recession of |xi - v|^2 is |xi|^2 = 1 on the sphere, so the
    concentration mass enters both forms in full.
    """
    part = V.partition
    if not 0 <= slab < part.n_t:
        raise WeakStrongError(f"slab {slab} out of range")
    vbar = _cell_average(ref, part, slab)
    lo = slab * part.n_space
    hi = lo + part.n_space

    tr = np.trace(V.nu_sec[lo:hi], axis1=2, axis2=3)
    mean_dot_v = np.einsum("cbi,ci->cb", V.nu_mean[lo:hi], vbar)
    vbar_sq = (vbar ** 2).sum(axis=1)
    per_bin = tr - 2.0 * mean_dot_v + vbar_sq[:, None]
    osc = float((V.nu_mass[lo:hi] * per_bin).sum(axis=1)
                @ np.ones(part.n_space)) * part.space_volume
    measure_form = 0.5 * osc + 0.5 * V.lam_t(slab)

    sel = [m for m, t in enumerate(ref.traj.times)
           if part.slab_of(float(t)) == slab]
    v_sq = float(np.mean([ref.energy_sq[m] for m in sel]))
    bary = barycenter(V)[lo:hi]
    cross = float(np.einsum("ci,ci->", bary, vbar)) * part.space_volume
    e_slab = energy_of(V, slab)
    expanded_form = e_slab + 0.5 * v_sq - cross

    # identity agreement is judged against the energy scale of the two
    # sides, not against F itself, which vanishes when weak tracks strong
    scale = e_slab + 0.5 * v_sq
    return {"slab": slab, "measure_form": measure_form,
            "expanded_form": expanded_form,
            "forms_gap": abs(measure_form - expanded_form),
            "scale": scale}


def initial_relative_energy(u0: SpectralField, v0: SpectralField) -> float:
    """F(0-) = 0.5 ||u(0) - v(0)||^2, compared on the finer grid."""
    if u0.grid.n == v0.grid.n:
        return 0.5 * l2_norm_sq(u0 - v0)
    fine, coarse = (u0, v0) if u0.grid.n > v0.grid.n else (v0, u0)
    return 0.5 * l2_norm_sq(fine - resample(coarse, fine.grid))


# -- nonlinear cross term -----------------------------------------------------


def crossterm_identity_check(V: GeneralizedYoungMeasure, ref: StrongReference,
                             t_end: float) -> dict:
    """Residual of the relative-energy cross-term identity up to t_end.

    For divergence-free fields,
        int <nu, (xi - v) x (xi - v)> : grad v
      = int <nu, xi x xi> : grad v  -  int div(v x v) . <nu, xi>,
    which is how the transport terms recombine in the Gronwall closure.
    Sample-exact for dirac embeds (source trajectory retained), cell-moment
    based otherwise.
    """
    part = V.partition
    dim = part.dim
    if V.source is not None:
        return _crossterm_pointwise(V, ref, t_end)

    # cell-moment route: all factors averaged per cell
    n_slabs = int(round((t_end - part.t0) / part.slab_duration))
    lhs_a1 = rhs = a3 = 0.0
    bary = barycenter(V)
    for slab in range(n_slabs):
        gv = _cell_average_tensor(ref, part, slab)           # grad v per cell
        dv = _cell_average(ref, part, slab)                  # v per cell
        dvv = _cell_average_divvv(ref, part, slab)           # div(v x v)
        lo = slab * part.n_space
        hi = lo + part.n_space
        sec = np.einsum("cb,cbij->cij", V.nu_mass[lo:hi], V.nu_sec[lo:hi])
        mean = bary[lo:hi]
        lhs_a1 += np.einsum("cij,cij->", sec, gv) * part.cell_volume
        a3 += -np.einsum("ci,ci->", dvv, mean) * part.cell_volume
        # <nu, (xi-v)(xi-v)> = sec - mean x v - v x mean + v x v
        shifted = (sec - np.einsum("ci,cj->cij", mean, dv)
                   - np.einsum("ci,cj->cij", dv, mean)
                   + np.einsum("ci,cj->cij", dv, dv))
        rhs += np.einsum("cij,cij->", shifted, gv) * part.cell_volume
    return {"lhs": lhs_a1 + a3, "rhs": rhs, "residual": abs(lhs_a1 + a3 - rhs)}


def _crossterm_pointwise(V, ref, t_end) -> dict:
    part = V.partition
    dim = part.dim
    src = V.source
    nw = src.grid.n
    stride = ref.grid.n // nw
    if stride * nw != ref.grid.n:
        raise WeakStrongError("weak grid must divide the reference grid")
    ref_at = {float(t): m for m, t in enumerate(ref.traj.times)}
    quad_w = (2.0 * np.pi) ** dim / nw ** dim

    times = np.asarray(src.times, dtype=float)
    lhs_a1 = a3 = rhs = 0.0
    for m, tm in enumerate(times):
        if tm >= t_end - 1e-12:
            continue
        t_next = times[m + 1] if m + 1 < len(times) else t_end
        w = min(float(t_next), t_end) - float(tm)
        if float(tm) not in ref_at:
            raise WeakStrongError(f"reference lacks a snapshot at t={tm}")
        mv = ref_at[float(tm)]
        vfield = SpectralField.from_physical(ref.grid, ref.traj.values[mv])
        grad_v = gradient_physical(vfield)
        div_vv = _div_outer(vfield)
        sub = (slice(None), slice(None, None, stride)) + \
              (slice(None, None, stride),) * (dim - 1)
        v = ref.traj.values[mv][sub]
        gv = grad_v[(slice(None),) + sub]
        dvv = div_vv[sub]
        u = src.values[m]
        diff = u - v
        a1_t = sum(float(np.sum(u[i] * u[j] * gv[i, j]))
                   for i in range(dim) for j in range(dim))
        rhs_t = sum(float(np.sum(diff[i] * diff[j] * gv[i, j]))
                    for i in range(dim) for j in range(dim))
        a3_t = -sum(float(np.sum(dvv[i] * u[i])) for i in range(dim))
        lhs_a1 += w * quad_w * a1_t
        a3 += w * quad_w * a3_t
        rhs += w * quad_w * rhs_t
    return {"lhs": lhs_a1 + a3, "rhs": rhs, "residual": abs(lhs_a1 + a3 - rhs)}


def _div_outer(v: SpectralField) -> np.ndarray:
    """Physical values of div(v x v), shape (dim,) + grid.shape."""
    grid = v.grid
    phys = v.to_physical()
    ks = grid.wavenumbers()
    out = np.zeros((grid.dim,) + grid.shape)
    for i in range(grid.dim):
        acc = np.zeros(grid.shape, dtype=np.complex128)
        for j in range(grid.dim):
            acc += 1j * ks[j] * np.fft.fftn(phys[i] * phys[j])
        out[i] = np.real(np.fft.ifftn(acc))
    return out


def _cell_average_tensor(ref, part, slab) -> np.ndarray:
    nf = ref.grid.n
    block = nf // part.n_x
    dim = part.dim
    sel = [m for m, t in enumerate(ref.traj.times)
           if part.slab_of(float(t)) == slab]
    acc = np.zeros((part.n_space, dim, dim))
    for m in sel:
        f = SpectralField.from_physical(ref.grid, ref.traj.values[m])
        g = gradient_physical(f)
        if dim == 2:
            blocks = g.reshape(dim, dim, part.n_x, block, part.n_x, block)
            acc += blocks.mean(axis=(3, 5)).transpose(2, 3, 0, 1).reshape(
                part.n_space, dim, dim)
        else:
            blocks = g.reshape(dim, dim, part.n_x, block, part.n_x, block,
                               part.n_x, block)
            acc += blocks.mean(axis=(3, 5, 7)).transpose(2, 3, 4, 0, 1).reshape(
                part.n_space, dim, dim)
    return acc / len(sel)


def _cell_average_divvv(ref, part, slab) -> np.ndarray:
    nf = ref.grid.n
    block = nf // part.n_x
    dim = part.dim
    sel = [m for m, t in enumerate(ref.traj.times)
           if part.slab_of(float(t)) == slab]
    acc = np.zeros((part.n_space, dim))
    for m in sel:
        f = SpectralField.from_physical(ref.grid, ref.traj.values[m])
        d = _div_outer(f)
        if dim == 2:
            blocks = d.reshape(dim, part.n_x, block, part.n_x, block)
            acc += blocks.mean(axis=(2, 4)).transpose(1, 2, 0).reshape(
                part.n_space, dim)
        else:
            blocks = d.reshape(dim, part.n_x, block, part.n_x, block,
                               part.n_x, block)
            acc += blocks.mean(axis=(2, 4, 6)).transpose(1, 2, 3, 0).reshape(
                part.n_space, dim)
    return acc / len(sel)


# -- Gronwall audit -----------------------------------------------------------


def gronwall_audit(times: np.ndarray, f_matrix: np.ndarray, f0: np.ndarray,
                   tau: np.ndarray, level: float, slack: float) -> dict:
    """Check E[F(t and tau_L)] <= (E[F(0)] + slack) exp(L t) per time.

    f_matrix[p, i] is path p's relative energy at times[i]; beyond the
    path's stopping time the value freezes (the stopped process).  Reports
    envelope margins and the stopped supremum.
    """
    times = np.asarray(times, dtype=float)
    f_matrix = np.asarray(f_matrix, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if f_matrix.shape != (len(tau), len(times)):
        raise WeakStrongError("relative-energy matrix shape mismatch")
    stopped = f_matrix.copy()
    for p in range(len(tau)):
        alive = times <= tau[p] + 1e-12
        if alive.any():
            last = np.max(np.nonzero(alive)[0])
            stopped[p, last + 1:] = stopped[p, last]
        else:
            stopped[p, :] = float(f0[p])
    mean_f = stopped.mean(axis=0)
    envelope = (float(np.mean(f0)) + slack) * np.exp(level * times)
    margins = envelope - mean_f
    return {
        "times": [float(t) for t in times],
        "mean_stopped_F": [float(x) for x in mean_f],
        "envelope": [float(x) for x in envelope],
        "min_margin": float(np.min(margins)),
        "sup_mean_F": float(np.max(mean_f)),
        "level": level,
        "slack": slack,
        "passed": bool(np.all(margins >= 0.0)),
    }


# -- orchestration ------------------------------------------------------------


@dataclass(frozen=True)
class WeakStrongSetup:
    """One weak-vs-reference comparison setup sharing data and noise."""

    weak: SolverConfig
    reference: SolverConfig
    seed: int
    tail_tol: float = 1e-6

    def __post_init__(self):
        r = self.reference
        w = self.weak
        if r.grid.n % w.grid.n != 0:
            raise WeakStrongError("reference grid must refine the weak grid")
        ratio = w.dt / r.dt
        if abs(ratio - round(ratio)) > 1e-9 or int(round(ratio)) < 1:
            raise WeakStrongError("reference dt must divide the weak dt")
        if int(round(ratio)) & (int(round(ratio)) - 1):
            raise WeakStrongError("dt refinement must be a power of two")

    @property
    def dt_ratio(self) -> int:
        return int(round(self.weak.dt / self.reference.dt))


def compare_path(setup: WeakStrongSetup, path_id: int,
                 partition: CellPartition, radius: float,
                 snapshot_times, bins_per_axis: int = 16,
                 reference: StrongReference | None = None,
                 ref_initial: SpectralField | None = None) -> dict:
    """Run weak and reference on one shared path; relative energy per slab.

    A prebuilt reference (same seed/path) can be passed to amortize the
    fine run across a viscosity ladder.
    """
    weak_path = None
    if setup.weak.forcing is not None:
        weak_path = WienerPath.sample(setup.seed, path_id,
                                      setup.weak.forcing.rank, setup.weak.dt,
                                      setup.weak.steps)

    weak_run = run_path(setup.weak, setup.seed, path_id, path=weak_path,
                        snapshot_times=snapshot_times)
    if reference is None:
        ref_path = weak_path.refined(setup.dt_ratio) if weak_path is not None else None
        ref_run = run_path(setup.reference, setup.seed, path_id, path=ref_path,
                           snapshot_times=snapshot_times)
        reference = build_reference(ref_run, tail_tol=setup.tail_tol)
        ref_initial = ref_run.snapshots[0]
    elif ref_initial is None:
        ref_initial = SpectralField.from_physical(reference.grid,
                                                  reference.traj.values[0])

    V = dirac_embed(weak_run.trajectory(), partition, radius,
                    bins_per_axis=bins_per_axis)
    f0 = initial_relative_energy(weak_run.snapshots[0], ref_initial)
    slabs = [relative_energy(V, reference, s) for s in range(partition.n_t)]
    return {
        "path_id": path_id,
        "f0": f0,
        "slabs": slabs,
        "measure_F": np.array([s["measure_form"] for s in slabs]),
        "expanded_F": np.array([s["expanded_form"] for s in slabs]),
        "reference": reference,
        "weak_run": weak_run,
        "measure": V,
    }


def weak_strong_ladder(eps_values, weak_base: SolverConfig,
                       reference_cfg: SolverConfig, seed: int, path_ids,
                       partition: CellPartition, radius: float,
                       snapshot_times, level: float | None = None,
                       slack: float = 0.0, bins_per_axis: int = 16,
                       tail_tol: float = 1e-6) -> dict:
    """Full weak-strong audit along a viscosity ladder with shared noise.

    The resolved reference is integrated once per path and reused for every
    viscosity.  Returns per-eps relative-energy matrices, the Gronwall
    report, and the paired monotonicity diagnostics along the ladder.
    """
    path_ids = list(path_ids)
    setups = {eps: WeakStrongSetup(weak=weak_base.with_eps(eps),
                                   reference=reference_cfg, seed=seed,
                                   tail_tol=tail_tol)
              for eps in eps_values}
    base_setup = setups[eps_values[0]]

    refs, ref_ics = {}, {}
    for pid in path_ids:
        ref_path = None
        if reference_cfg.forcing is not None:
            weak_path = WienerPath.sample(seed, pid, weak_base.rank,
                                          weak_base.dt, weak_base.steps)
            ref_path = weak_path.refined(base_setup.dt_ratio)
        ref_run = run_path(reference_cfg, seed, pid, path=ref_path,
                           snapshot_times=snapshot_times)
        refs[pid] = build_reference(ref_run, tail_tol=tail_tol)
        ref_ics[pid] = ref_run.snapshots[0]

    if level is None:
        level = 1.05 * max(refs[pid].grad_sup_max() for pid in path_ids)
    taus = np.array([stopping_time(refs[pid], level) for pid in path_ids])
    slab_times = partition.t0 + (np.arange(partition.n_t) + 1.0) \
        * partition.slab_duration

    per_eps = {}
    for eps in eps_values:
        f_rows, f0s, gaps = [], [], []
        for pid in path_ids:
            out = compare_path(setups[eps], pid, partition, radius,
                               snapshot_times, bins_per_axis,
                               reference=refs[pid], ref_initial=ref_ics[pid])
            f_rows.append(out["measure_F"])
            f0s.append(out["f0"])
            gaps.append(max(s["forms_gap"] / max(s["scale"], 1e-300)
                            for s in out["slabs"]))
        f_matrix = np.stack(f_rows)
        audit = gronwall_audit(slab_times, f_matrix, np.asarray(f0s), taus,
                               level, slack)
        per_eps[eps] = {
            "f_matrix": f_matrix,
            "f0": np.asarray(f0s),
            "max_forms_gap_rel": float(np.max(gaps)),
            "gronwall": audit,
            "sup_mean_F": audit["sup_mean_F"],
        }
    return {
        "eps_values": list(eps_values),
        "level": level,
        "slack": slack,
        "stopping_times": taus,
        "per_eps": per_eps,
        "monotone": ladder_monotone_within_ci(per_eps, list(eps_values), taus,
                                              slab_times),
    }


def ladder_monotone_within_ci(per_eps: dict, eps_values, taus,
                              slab_times, z: float = 1.96) -> dict:
    """Paired test that sup_t E[F(t and tau)] does not increase as eps drops."""
    sups = {}
    for eps in eps_values:
        f = per_eps[eps]["f_matrix"]
        stopped = f.copy()
        for p in range(f.shape[0]):
            alive = slab_times <= taus[p] + 1e-12
            if alive.any():
                last = int(np.max(np.nonzero(alive)[0]))
                stopped[p, last + 1:] = stopped[p, last]
        sups[eps] = stopped.max(axis=1)
    rows = []
    ok = True
    for a, b in zip(eps_values, eps_values[1:]):
        diff = sups[a] - sups[b]     # should be >= 0: larger eps, larger F
        n = len(diff)
        se = float(diff.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        mean = float(diff.mean())
        passed = bool(mean >= -z * se)
        ok = ok and passed
        rows.append({"from_eps": a, "to_eps": b, "mean_drop": mean,
                     "se": se, "passed": passed})
    return {"rows": rows, "passed": ok,
            "sup_by_eps": {e: float(np.mean(sups[e])) for e in eps_values}}
