"""Energy records, Gaussian-weighted localized energies, and regularity scans.

The monitored quantities are the ones controlled by the a priori estimates:
total Dirichlet + penalty energy and the accumulated time-derivative energy;
the backward-heat-kernel-weighted local energies Phi(R) and Psi(R) on
parabolic windows; the per-node energy density with its Bochner-type ratio;
and lattice scans that flag windows where the localized energy refuses to
become small (singular-set candidates).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import DegenerateTime, WindowOutOfRange
from .geometry import EmbeddedManifold, _smoothstep, penalty_potential
from .pde import FieldState, TorusGrid, Trajectory, discrete_gradient, discrete_laplacian


@dataclass(frozen=True)
class MonitorRecord:
    """Per-time diagnostics of a solver run; all entries are nonnegative."""

    t: float
    dirichlet_energy: float
    penalty_energy: float
    time_derivative_energy: float  # accumulated integral of |d_t v|^2
    max_dist: float
    max_gradient_sq: float


def energy_record(
    state: FieldState,
    eps: Optional[float],
    prev_state: Optional[FieldState],
    M: EmbeddedManifold,
    accumulated: float = 0.0,
) -> MonitorRecord:
    """Quadrature of the monitored energies at one snapshot.

    ``accumulated`` carries the running time-derivative energy maintained by
    the solver loop; when it is zero and ``prev_state`` is given, the single
    forward-difference contribution is used instead (standalone calls).
    """
    grid = state.grid
    cell = grid.dx**grid.m
    grad = discrete_gradient(state.values, grid)
    grad_sq = np.sum(grad * grad, axis=(-2, -1))
    dirichlet = 0.5 * float(np.sum(grad_sq)) * cell
    d = np.asarray(M.dist(state.values))
    if eps is None:
        penalty = 0.0
    else:
        penalty = float(np.sum(penalty_potential(M, state.values))) * cell / eps
    accum = accumulated
    if prev_state is not None and accumulated == 0.0:
        dt = state.t - prev_state.t
        if dt > 0:
            diff = (state.values - prev_state.values) / dt
            accum = float(np.sum(diff * diff)) * cell * dt
    return MonitorRecord(
        t=float(state.t),
        dirichlet_energy=dirichlet,
        penalty_energy=penalty,
        time_derivative_energy=accum,
        max_dist=float(np.max(d)),
        max_gradient_sq=float(np.max(grad_sq)),
    )


# ---------------------------------------------------------------------------
# parabolic windows and the heat kernel


@dataclass(frozen=True)
class ParabolicWindow:
    """Window centered at z0 = (t0, x0) with radius R.

    The annulus T_R runs over t in (t0 - 4R^2, t0 - R^2); its constraint
    R < min(1/2, sqrt(t0)/2) keeps it inside the time range.
    """

    t0: float
    x0: np.ndarray
    R: float

    def __post_init__(self):
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))
        if not 0 < self.R < min(0.5, np.sqrt(max(self.t0, 0.0)) / 2.0):
            raise WindowOutOfRange(
                f"need 0 < R < min(1/2, sqrt(t0)/2); got R={self.R}, t0={self.t0}"
            )

    @property
    def annulus_times(self):
        return (self.t0 - 4.0 * self.R * self.R, self.t0 - self.R * self.R)

    @property
    def cylinder_times(self):
        return (self.t0 - self.R * self.R, self.t0 + self.R * self.R)


def torus_offset(x, x0):
    """Representative of x - x0 in the fundamental domain centered at x0."""
    diff = np.asarray(x, dtype=float) - np.asarray(x0, dtype=float)
    return diff - np.round(diff)


def heat_kernel(z0, t, x, m: Optional[int] = None):
    """Backward Gaussian kernel centered at z0 = (t0, x0), evaluated at (t, x).

    |x - x0| uses the representative in the fundamental domain centered at
    x0; the spatial cut-off supported in B(x0, 1/2) makes farther lattice
    images irrelevant.
    """
    t0, x0 = z0
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if m is None:
        m = x0.shape[-1]
    gap = abs(t0 - t)
    if gap < 1e-12:
        raise DegenerateTime(f"|t0 - t| = {gap:.3g} below 1e-12")
    x = np.asarray(x, dtype=float)
    if m == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x.reshape(x.shape + (1,))
    if x.shape[-1] != m:
        raise ValueError(f"positions must have trailing dimension {m}")
    off = torus_offset(x, x0)
    r2 = np.sum(off * off, axis=-1)
    return (2.0 * np.pi * gap) ** (-m / 2.0) * np.exp(-r2 / (2.0 * gap))


def window_cutoff(x, x0):
    """Smoothstep cut-off: 1 on B(x0, 1/4), 0 outside B(x0, 1/2)."""
    off = torus_offset(x, x0)
    r = np.sqrt(np.sum(off * off, axis=-1))
    return 1.0 - _smoothstep((r - 0.25) / 0.25)


def energy_density(values, grid: TorusGrid, M: EmbeddedManifold, eps: Optional[float]):
    """Pointwise e = 1/2 |grad v|^2 + G(v)/eps (penalty term absent if eps None)."""
    grad = discrete_gradient(values, grid)
    e = 0.5 * np.sum(grad * grad, axis=(-2, -1))
    if eps is not None:
        e = e + penalty_potential(M, values) / eps
    return e


def _stored_energy_density(
    traj: Trajectory, M: EmbeddedManifold, k: int, eps: Optional[float]
):
    grad = traj.gradients[k]
    e = 0.5 * np.sum(grad * grad, axis=(-2, -1))
    if eps is not None:
        e = e + penalty_potential(M, traj.values[k]) / eps
    return e


def phi_quantity(
    traj: Trajectory, M: EmbeddedManifold, z0, R: float, eps: Optional[float] = None
) -> float:
    """Phi(R): R^2 times the weighted energy at the slice t0 - R^2/2."""
    window = z0 if isinstance(z0, ParabolicWindow) else ParabolicWindow(z0[0], z0[1], R)
    eps_eff = traj.epsilon if eps is None else eps
    t_slice = window.t0 - 0.5 * R * R
    if t_slice < traj.times[0] - 1e-12 or t_slice > traj.times[-1] + 1e-12:
        raise WindowOutOfRange(f"slice time {t_slice:.6g} outside trajectory")
    values = traj.field_at(t_slice)
    e = energy_density(values, traj.grid, M, eps_eff)
    coords = traj.grid.node_coords()
    rho = heat_kernel((window.t0, window.x0), t_slice, coords, m=traj.grid.m)
    cut = window_cutoff(coords, window.x0)
    cell = traj.grid.dx**traj.grid.m
    return float(R * R * np.sum(e * rho * cut * cut) * cell)


def psi_time_indices(traj: Trajectory, window: ParabolicWindow):
    """Stored-state indices whose time falls in the annulus [t0-4R^2, t0-R^2)."""
    lo, hi = window.annulus_times
    if lo < traj.times[0] - 1e-12:
        raise WindowOutOfRange(f"annulus start {lo:.6g} precedes trajectory")
    idx = np.nonzero((traj.times >= lo - 1e-12) & (traj.times < hi - 1e-12))[0]
    if idx.size == 0:
        raise WindowOutOfRange("no stored states inside the annulus; store more often")
    return idx


def psi_quantity(
    traj: Trajectory, M: EmbeddedManifold, z0, R: float, eps: Optional[float] = None
) -> float:
    """Psi(R): the space-time weighted energy over the annulus T_R(z0).

    Discretized as a left-point sum over the stored states inside the annulus
    with weight store_dt, and the grid quadrature in space. The acceptance
    oracle recomputes exactly this sum with an independent scalar double loop.
    """
    window = z0 if isinstance(z0, ParabolicWindow) else ParabolicWindow(z0[0], z0[1], R)
    eps_eff = traj.epsilon if eps is None else eps
    idx = psi_time_indices(traj, window)
    coords = traj.grid.node_coords()
    cut = window_cutoff(coords, window.x0)
    cut2 = cut * cut
    cell = traj.grid.dx**traj.grid.m
    total = 0.0
    for k in idx:
        e = _stored_energy_density(traj, M, int(k), eps_eff)
        rho = heat_kernel(
            (window.t0, window.x0), float(traj.times[k]), coords, m=traj.grid.m
        )
        total += float(np.sum(e * rho * cut2)) * cell * traj.store_dt
    return total


# ---------------------------------------------------------------------------
# Bochner density and scans


def bochner_density(
    values, grid: TorusGrid, M: EmbeddedManifold, eps: float, R_scale: float = 1.0
):
    """Per-node e = 1/2 |grad v|^2 + (R^2/eps) G(v)."""
    grad = discrete_gradient(values, grid)
    e = 0.5 * np.sum(grad * grad, axis=(-2, -1))
    return e + (R_scale * R_scale / eps) * penalty_potential(M, values)


@dataclass(frozen=True)
class BochnerReport:
    max_ratio: float
    n_active: int


def bochner_report(
    state: FieldState,
    next_state: FieldState,
    M: EmbeddedManifold,
    eps: float,
    R_scale: float = 1.0,
    floor: float = 1e-10,
) -> BochnerReport:
    """Pointwise ratio of (d_t - 1/2 Lap) e against e (R^2 + e); diagnostic only."""
    grid = state.grid
    dt = next_state.t - state.t
    if dt <= 0:
        raise ValueError("need next_state.t > state.t")
    e0 = bochner_density(state.values, grid, M, eps, R_scale)
    e1 = bochner_density(next_state.values, grid, M, eps, R_scale)
    lhs = (e1 - e0) / dt - 0.5 * discrete_laplacian(e0[..., None], grid)[..., 0]
    denom = e0 * (R_scale * R_scale + e0)
    active = e0 > floor
    if not np.any(active):
        return BochnerReport(max_ratio=0.0, n_active=0)
    return BochnerReport(
        max_ratio=float(np.max(lhs[active] / denom[active])),
        n_active=int(np.sum(active)),
    )


@dataclass(frozen=True)
class ScanEntry:
    t0: float
    x0: tuple
    psi: float
    local_sup: float


@dataclass(frozen=True)
class ScanReport:
    """Empirical small-energy-implies-bounded-gradient table on a z0 lattice."""

    R: float
    kappa: float
    theta0_trial: float
    entries: List[ScanEntry]

    def implication_table(self, cap: float):
        small = [s for s in self.entries if s.psi < self.theta0_trial]
        if not small:
            return {"n_small": 0, "n_violating": 0, "fraction_bounded": 1.0}
        bound = cap / (self.kappa * self.R) ** 2
        violating = [s for s in small if s.local_sup > bound]
        return {
            "n_small": len(small),
            "n_violating": len(violating),
            "fraction_bounded": 1.0 - len(violating) / len(small),
        }

    def to_dict(self):
        return {
            "R": self.R,
            "kappa": self.kappa,
            "theta0_trial": self.theta0_trial,
            "entries": [
                {
                    "t0": s.t0,
                    "x0": list(s.x0),
                    "psi": s.psi,
                    "local_sup": s.local_sup,
                }
                for s in self.entries
            ],
        }


def _scan_lattice(traj: Trajectory, R: float, lattice: int, t_points: int):
    # t0 must clear both the window constraint R < sqrt(t0)/2 and the stored range
    t_lo = float(traj.times[0]) + 4.0 * R * R * (1.0 + 1e-6) + 1e-9
    t_hi = traj.t_final
    if t_lo >= t_hi:
        raise WindowOutOfRange("R too large for the trajectory horizon")
    t_vals = np.linspace(t_lo, t_hi, t_points)
    axes = [np.linspace(0.0, 1.0, lattice, endpoint=False) for _ in range(traj.grid.m)]
    mesh = np.meshgrid(*axes, indexing="ij")
    x_vals = np.stack(mesh, axis=-1).reshape(-1, traj.grid.m)
    return t_vals, x_vals


def regularity_scan(
    traj: Trajectory,
    M: EmbeddedManifold,
    theta0_trial: float,
    R: float,
    kappa: float = 0.5,
    lattice: int = 8,
    t_points: int = 8,
    eps: Optional[float] = None,
) -> ScanReport:
    """Record (Psi(R), local sup of e over Q_{kappa R}) on a coarse z0 lattice."""
    eps_eff = traj.epsilon if eps is None else eps
    t_vals, x_vals = _scan_lattice(traj, R, lattice, t_points)
    coords = traj.grid.node_coords()
    entries = []
    dens = {}

    def density(k):
        if k not in dens:
            dens[k] = _stored_energy_density(traj, M, k, eps_eff)
        return dens[k]

    r_cyl = kappa * R
    for t0 in t_vals:
        for x0 in x_vals:
            window = ParabolicWindow(float(t0), x0, R)
            psi = psi_quantity(traj, M, window, R, eps=eps_eff)
            lo, hi = window.cylinder_times
            ks = np.nonzero((traj.times >= lo - 1e-12) & (traj.times <= hi + 1e-12))[0]
            off = torus_offset(coords, x0)
            near = np.sqrt(np.sum(off * off, axis=-1)) < r_cyl
            local = 0.0
            for k in ks:
                e = density(int(k))
                if np.any(near):
                    local = max(local, float(np.max(e[near])))
            entries.append(
                ScanEntry(float(t0), tuple(float(c) for c in x0), psi, local)
            )
    return ScanReport(R=R, kappa=kappa, theta0_trial=theta0_trial, entries=entries)


@dataclass(frozen=True)
class SingularSetReport:
    theta0_trial: float
    R_ladder: tuple
    t_values: np.ndarray
    x_values: np.ndarray
    mask: np.ndarray  # (n_t, n_x) bool
    fraction: float
    measure_estimate: float


def singular_set_detect(
    trajs: Sequence[Trajectory],
    M: EmbeddedManifold,
    theta0_trial: float,
    R_ladder: Sequence[float],
    lattice: int = 8,
    t_points: int = 8,
) -> SingularSetReport:
    """Mark lattice points whose localized energy stays above threshold.

    The liminf over eps -> 0 is surrogated by the minimum over the two
    smallest epsilons of the family; a point is marked when that surrogate
    stays >= theta0 for every R in the ladder.
    """
    if len(trajs) < 2:
        raise ValueError("need at least two epsilon levels")
    if any(t.epsilon is None for t in trajs):
        raise ValueError("singular-set detection needs penalized trajectories")
    order = np.argsort([t.epsilon for t in trajs])
    tail = [trajs[int(i)] for i in order[:2]]
    R_max = max(R_ladder)
    t_vals, x_vals = _scan_lattice(tail[0], R_max, lattice, t_points)
    mask = np.ones((len(t_vals), len(x_vals)), dtype=bool)
    for i, t0 in enumerate(t_vals):
        for j, x0 in enumerate(x_vals):
            for R in R_ladder:
                window = ParabolicWindow(float(t0), x0, float(R))
                surrogate = min(
                    psi_quantity(traj, M, window, float(R)) for traj in tail
                )
                if surrogate < theta0_trial:
                    mask[i, j] = False
                    break
    fraction = float(np.mean(mask))
    horizon = float(tail[0].t_final - tail[0].times[0])
    return SingularSetReport(
        theta0_trial=theta0_trial,
        R_ladder=tuple(float(R) for R in R_ladder),
        t_values=t_vals,
        x_values=x_vals,
        mask=mask,
        fraction=fraction,
        measure_estimate=fraction * horizon,
    )


# ---------------------------------------------------------------------------
# fitted constants (reported, never asserted)


def fit_exponent(xs, ys) -> float:
    """Least-squares slope of log y against log x."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    good = (xs > 0) & (ys > 0)
    if np.sum(good) < 2:
        return float("nan")
    return float(np.polyfit(np.log(xs[good]), np.log(ys[good]), 1)[0])


def fit_energy_growth_constant(records: Sequence[MonitorRecord], tol: float = 1e-6):
    """Smallest C >= 0 with accum + sup_t(|grad|^2 + penalty) <= e^{CT}(CT + E0)."""
    e0 = 2.0 * records[0].dirichlet_energy
    T = records[-1].t - records[0].t
    lhs = max(
        r.time_derivative_energy + 2.0 * r.dirichlet_energy + r.penalty_energy
        for r in records
    )

    def ok(c):
        return lhs <= np.exp(c * T) * (c * T + e0) + 1e-12

    if ok(0.0):
        return 0.0
    lo, hi = 0.0, 1.0
    while not ok(hi):
        hi *= 2.0
        if hi > 1e6:
            return float("inf")
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if ok(mid) else (mid, hi)
    return hi


def fit_window_constant(R_values, psi_values, tol: float = 1e-6):
    """Smallest C >= 0 with Psi(R) <= e^{C(R0-R)} Psi(R0) + C(R0-R) on the ladder."""
    order = np.argsort(R_values)
    Rs = np.asarray(R_values, dtype=float)[order]
    Ps = np.asarray(psi_values, dtype=float)[order]
    R0, P0 = Rs[-1], Ps[-1]

    def ok(c):
        gaps = R0 - Rs[:-1]
        return np.all(Ps[:-1] <= np.exp(c * gaps) * P0 + c * gaps + 1e-12)

    if ok(0.0):
        return 0.0
    lo, hi = 0.0, 1.0
    while not ok(hi):
        hi *= 2.0
        if hi > 1e9:
            return float("inf")
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if ok(mid) else (mid, hi)
    return hi
