"""Finite-difference solvers on the flat torus.

Two flows are integrated for fields v : [0,T] x T^m -> R^L:

* the penalized flow  dv/dt = 1/2 Lap v - (1/2 eps) grad G(v) + fbar(v, grad v),
  with the stiff penalty handled by an exact normal relaxation substep (IMEX),
  so the step size is tied to dx^2 only;
* the intrinsic m=1 flow  dv/dt = 1/2 v_xx - 1/2 Abar(v)(v_x, v_x) + fbar,
  followed by projection of every node back onto N.

Fields are arrays of shape grid.shape + (L,); stencils are second-order
central with periodic wrap.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import (
    CflViolated,
    Diverged,
    InitialDataOffManifold,
    NodeLeftTube,
    ProjectionOutsideTube,
)
from .generators import Generator, eval_extended_generator
from .geometry import EmbeddedManifold, extended_sff


@dataclass(frozen=True)
class TorusGrid:
    """Uniform periodic grid on T^m with n_nodes per axis, m in {1, 2}."""

    m: int
    n_nodes: int

    def __post_init__(self):
        if self.m not in (1, 2):
            raise ValueError("m must be 1 or 2")
        if self.n_nodes < 8:
            raise ValueError("n_nodes must be >= 8")

    @property
    def dx(self) -> float:
        return 1.0 / self.n_nodes

    @property
    def shape(self):
        return (self.n_nodes,) * self.m

    @property
    def n_total(self) -> int:
        return self.n_nodes**self.m

    def node_coords(self) -> np.ndarray:
        """Coordinates of the nodes, shape grid.shape + (m,)."""
        axes = [np.arange(self.n_nodes) * self.dx for _ in range(self.m)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1)


@dataclass
class FieldState:
    """Snapshot v(t, .) on the grid; values shape grid.shape + (L,)."""

    t: float
    values: np.ndarray
    grid: TorusGrid

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")


@dataclass
class Trajectory:
    """Uniformly spaced snapshots of a solved field over [0, T].

    ``epsilon`` is the penalization parameter, or None for the intrinsic
    solver. ``dt`` is the solver step; stored states are ``store_stride``
    steps apart. Immutable after creation; gradients of the stored states are
    computed lazily once and shared.
    """

    grid: TorusGrid
    times: np.ndarray
    values: np.ndarray  # (n_stored,) + grid.shape + (L,)
    dt: float
    epsilon: Optional[float]
    generator_id: str
    manifold_id: str
    monitors: List["MonitorRecord"] = field(default_factory=list)
    _gradients: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        dts = np.diff(self.times)
        if len(self.times) < 2 or not np.all(dts > 0):
            raise ValueError("need strictly increasing stored times")
        if not np.allclose(dts, dts[0], rtol=1e-10, atol=1e-14):
            raise ValueError("stored times must be uniformly spaced")

    @property
    def store_dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def t_final(self) -> float:
        return float(self.times[-1])

    @property
    def is_intrinsic(self) -> bool:
        return self.epsilon is None

    @property
    def gradients(self) -> np.ndarray:
        if self._gradients is None:
            grads = np.stack(
                [discrete_gradient(v, self.grid) for v in self.values], axis=0
            )
            object.__setattr__(self, "_gradients", grads)
        return self._gradients

    def state_at(self, k: int) -> FieldState:
        return FieldState(float(self.times[k]), self.values[k], self.grid)

    def field_at(self, t: float) -> np.ndarray:
        """Linear-in-time interpolation of the stored field at time t."""
        k, lam = self._bracket(t)
        if lam == 0.0:
            return self.values[k]
        return (1.0 - lam) * self.values[k] + lam * self.values[k + 1]

    def _bracket(self, t: float):
        if t < self.times[0] - 1e-12 or t > self.times[-1] + 1e-12:
            raise ValueError(f"time {t} outside stored range")
        a = (t - self.times[0]) / self.store_dt
        k = int(min(max(np.floor(a), 0), len(self.times) - 2))
        lam = float(min(max(a - k, 0.0), 1.0))
        return k, lam


# ---------------------------------------------------------------------------
# stencils


def discrete_laplacian(values: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Second-order periodic Laplacian; exact zero on affine fields."""
    acc = np.zeros_like(values)
    inv_dx2 = 1.0 / (grid.dx * grid.dx)
    for ax in range(grid.m):
        acc += (
            np.roll(values, -1, axis=ax) + np.roll(values, 1, axis=ax) - 2.0 * values
        ) * inv_dx2
    return acc


def discrete_gradient(values: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Central periodic gradient, shape grid.shape + (m, L)."""
    inv_2dx = 0.5 / grid.dx
    cols = [
        (np.roll(values, -1, axis=ax) - np.roll(values, 1, axis=ax)) * inv_2dx
        for ax in range(grid.m)
    ]
    return np.stack(cols, axis=-2)


# ---------------------------------------------------------------------------
# time stepping


def cfl_max_dt(grid: TorusGrid, eps: Optional[float], scheme: str = "imex") -> float:
    """Largest admissible step: heat bound for IMEX, min(heat, eps/4) explicit."""
    heat = grid.dx * grid.dx / (2.0 * grid.m)
    if scheme == "imex":
        return 0.9 * heat
    if scheme == "explicit":
        if eps is None or eps <= 0:
            raise ValueError("explicit scheme needs eps > 0")
        return 0.9 * min(heat, eps / 4.0)
    raise ValueError("scheme must be 'imex' or 'explicit'")


def choose_dt(T: float, dt_max: float):
    """Split [0, T] into K equal steps with dt <= dt_max; returns (K, dt).

    Above 256 steps, K is rounded up to the next multiple of 256 so that the
    stored-snapshot stride divides the step count exactly (a <0.4% cost).
    """
    K = max(1, int(np.ceil(T / dt_max - 1e-12)))
    if K > 256:
        K = int(np.ceil(K / 256)) * 256
    return K, T / K


def initialize_from_map(
    h: Callable, grid: TorusGrid, M: EmbeddedManifold
) -> FieldState:
    """Sample h at the nodes and post-project once to kill roundoff.

    Raises InitialDataOffManifold when any raw node value sits further than
    1e-6 from N; roundoff-level defects are silently projected away.
    """
    raw = np.asarray(h(grid.node_coords()), dtype=float)
    if raw.shape != grid.shape + (M.ambient_dim,):
        raise ValueError(
            f"initial map returned shape {raw.shape}, "
            f"expected {grid.shape + (M.ambient_dim,)}"
        )
    d = np.asarray(M.dist(raw))
    if np.any(d > 1e-6):
        raise InitialDataOffManifold(
            f"initial map is {float(np.max(d)):.3g} from N (tolerance 1e-06)"
        )
    return FieldState(0.0, M.project(raw), grid)


def _check_tube(w: np.ndarray, grid: TorusGrid, M: EmbeddedManifold, t: float):
    d = np.asarray(M.dist(w))
    if np.any(d >= 3.0 * M.tube_radius):
        flat = int(np.argmax(d))
        idx = np.unravel_index(flat, grid.shape)
        raise NodeLeftTube(idx, t, float(d.reshape(-1)[flat]))
    return d


def step_penalized(
    state: FieldState,
    eps: float,
    dt: float,
    G: Generator,
    M: EmbeddedManifold,
    scheme: str = "imex",
) -> FieldState:
    """One step of the penalized flow.

    Explicit heat + generator update, then the penalty. Under "imex" the
    penalty substep is exact inside the inner tube: each node moves toward its
    frozen foot point by the factor exp(-dt/eps), the closed-form solution of
    dv/dt = -(1/eps)(v - P_N v). Nodes between delta0 and 2*delta0 fall back
    to the explicit penalty update; beyond 2*delta0 the penalty gradient is
    identically zero and nothing can recall them, which is why leaving the
    3*delta0 tube is a hard error rather than a silent continuation.
    """
    grid = state.grid
    if dt > cfl_max_dt(grid, eps, scheme) * (1.0 + 1e-12):
        raise CflViolated(f"dt={dt:.6g} exceeds bound for scheme '{scheme}'")
    v = state.values
    grad = discrete_gradient(v, grid)
    w = v + dt * (0.5 * discrete_laplacian(v, grid) + eval_extended_generator(G, M, v, grad))
    t_new = state.t + dt

    from .geometry import penalty_gradient  # local to avoid import cycle at module load

    d = _check_tube(w, grid, M, t_new)
    if scheme == "imex":
        flat = w.reshape(-1, w.shape[-1])
        dflat = d.reshape(-1)
        inner = dflat < M.tube_radius
        if np.any(inner):
            feet = M.project(flat[inner])
            flat[inner] = feet + (flat[inner] - feet) * np.exp(-dt / eps)
        outer = ~inner
        if np.any(outer):
            flat[outer] -= (0.5 * dt / eps) * penalty_gradient(M, flat[outer])
        w = flat.reshape(w.shape)
    else:
        w = w - (0.5 * dt / eps) * penalty_gradient(M, w)
    return FieldState(t_new, w, grid)


def step_intrinsic_m1(
    state: FieldState, dt: float, G: Generator, M: EmbeddedManifold
) -> FieldState:
    """Explicit step of the intrinsic m=1 equation, then exact projection."""
    grid = state.grid
    if grid.m != 1:
        raise ValueError("intrinsic solver is m=1 only")
    if dt > 0.9 * grid.dx * grid.dx / 2.0 * (1.0 + 1e-12):
        raise CflViolated(f"dt={dt:.6g} exceeds heat bound")
    v = state.values
    grad = discrete_gradient(v, grid)
    u = grad[..., 0, :]
    rhs = (
        0.5 * discrete_laplacian(v, grid)
        - 0.5 * extended_sff(M, v, u)
        + eval_extended_generator(G, M, v, grad)
    )
    w = v + dt * rhs
    t_new = state.t + dt
    d = np.asarray(M.dist(w))
    if np.any(d >= 3.0 * M.tube_radius):
        raise ProjectionOutsideTube(
            f"node drifted to dist {float(np.max(d)):.3g} in one step at t={t_new:.6g}"
        )
    return FieldState(t_new, M.project(w), grid)


def _resolve_strides(K: int, store_stride: Optional[int]):
    if store_stride is None:
        s = max(1, int(np.ceil(K / 256)))
        while K % s:
            s += 1
        if K // s < 16 and K <= 8192:
            s = 1  # awkward divisor structure: store every step rather than almost none
    else:
        s = int(store_stride)
        if s < 1 or K % s:
            raise ValueError(f"store_stride must divide the step count {K}")
    return s


def _check_divides(T: float, dt: float) -> int:
    K = int(round(T / dt))
    if K < 1 or abs(K * dt - T) > 1e-12 * max(1.0, abs(T)):
        raise ValueError(f"dt={dt!r} does not divide T={T!r}")
    return K


def _solve_loop(
    state: FieldState,
    stepper,
    K: int,
    dt: float,
    grid: TorusGrid,
    M: EmbeddedManifold,
    eps: Optional[float],
    generator_id: str,
    store_stride: Optional[int],
    record_stride: Optional[int],
) -> Trajectory:
    from .diagnostics import energy_record  # sibling import, lazy to avoid a cycle

    s_store = _resolve_strides(K, store_stride)
    s_rec = s_store if record_stride is None else int(record_stride)
    guard = 10.0 * (1.0 + M.radius_bound)

    cell = grid.dx**grid.m
    accum_dt_energy = 0.0
    times = [state.t]
    stored = [state.values.copy()]
    monitors = [energy_record(state, eps, None, M, accumulated=0.0)]
    prev = state
    for k in range(1, K + 1):
        state = stepper(state)
        if np.max(np.abs(state.values)) > guard:
            raise Diverged(f"field norm exceeded {guard:.3g} at t={state.t:.6g}")
        diff = (state.values - prev.values) / dt
        accum_dt_energy += float(np.sum(diff * diff)) * cell * dt
        if k % s_rec == 0 or k == K:
            monitors.append(
                energy_record(state, eps, prev, M, accumulated=accum_dt_energy)
            )
        if k % s_store == 0:
            times.append(state.t)
            stored.append(state.values.copy())
        prev = state
    return Trajectory(
        grid=grid,
        times=np.asarray(times),
        values=np.stack(stored, axis=0),
        dt=dt,
        epsilon=eps,
        generator_id=generator_id,
        manifold_id=M.name,
        monitors=monitors,
    )


def solve_penalized(
    h: Callable,
    eps: float,
    T: float,
    grid: TorusGrid,
    dt: float,
    G: Generator,
    M: EmbeddedManifold,
    scheme: str = "imex",
    store_stride: Optional[int] = None,
    record_stride: Optional[int] = None,
) -> Trajectory:
    """Integrate the penalized flow from v(0,.) = h over [0, T]."""
    K = _check_divides(T, dt)
    if dt > cfl_max_dt(grid, eps, scheme) * (1.0 + 1e-12):
        raise CflViolated(f"dt={dt:.6g} exceeds bound for scheme '{scheme}'")
    state0 = h if isinstance(h, FieldState) else initialize_from_map(h, grid, M)
    return _solve_loop(
        state0,
        lambda st: step_penalized(st, eps, dt, G, M, scheme=scheme),
        K,
        dt,
        grid,
        M,
        eps,
        G.kind,
        store_stride,
        record_stride,
    )


def solve_intrinsic_m1(
    h: Callable,
    T: float,
    grid: TorusGrid,
    dt: float,
    G: Generator,
    M: EmbeddedManifold,
    store_stride: Optional[int] = None,
    record_stride: Optional[int] = None,
) -> Trajectory:
    """Integrate the intrinsic m=1 flow (projection after every step)."""
    K = _check_divides(T, dt)
    state0 = h if isinstance(h, FieldState) else initialize_from_map(h, grid, M)
    return _solve_loop(
        state0,
        lambda st: step_intrinsic_m1(st, dt, G, M),
        K,
        dt,
        grid,
        M,
        None,
        G.kind,
        store_stride,
        record_stride,
    )


@dataclass(frozen=True)
class SolverComparison:
    """L2-in-space deviations between penalized runs and the intrinsic reference."""

    eps_list: tuple
    times: np.ndarray
    deviations: np.ndarray  # (n_eps, n_times)

    @property
    def max_deviation(self) -> np.ndarray:
        return np.max(self.deviations, axis=1)


def compare_solvers(
    h: Callable,
    T: float,
    grid: TorusGrid,
    dt: float,
    eps_list: Sequence[float],
    G: Generator,
    M: EmbeddedManifold,
) -> SolverComparison:
    """Solve the intrinsic reference and each penalized run on one grid."""
    if grid.m != 1:
        raise ValueError("comparison needs the intrinsic m=1 reference")
    K = _check_divides(T, dt)
    stride = _resolve_strides(K, None)
    ref = solve_intrinsic_m1(h, T, grid, dt, G, M, store_stride=stride)
    cell = grid.dx**grid.m
    rows = []
    for eps in eps_list:
        traj = solve_penalized(h, eps, T, grid, dt, G, M, store_stride=stride)
        diff = traj.values - ref.values
        rows.append(np.sqrt(np.sum(diff * diff, axis=tuple(range(1, diff.ndim))) * cell))
    return SolverComparison(
        eps_list=tuple(float(e) for e in eps_list),
        times=ref.times.copy(),
        deviations=np.stack(rows, axis=0),
    )


# ---------------------------------------------------------------------------
# trajectory export

_BIN_MAGIC = b"MBT1"


def save_trajectory_bin(traj: Trajectory, path) -> None:
    """Little-endian binary dump.

    Layout: magic "MBT1"; u32 m, n_nodes, L, n_stored; f64 dt, epsilon
    (NaN for intrinsic); then the stored times as f64[n_stored]; then the
    values as f64[n_stored * n_nodes^m * L] in C order.
    """
    L = traj.values.shape[-1]
    n_stored = traj.values.shape[0]
    header = _BIN_MAGIC + struct.pack(
        "<IIII", traj.grid.m, traj.grid.n_nodes, L, n_stored
    )
    header += struct.pack(
        "<dd", traj.dt, np.nan if traj.epsilon is None else float(traj.epsilon)
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(traj.times, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(traj.values, dtype="<f8").tobytes())


def load_trajectory_bin(path):
    """Read back (meta dict, times, values) written by save_trajectory_bin."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _BIN_MAGIC:
        raise ValueError("not a trajectory file")
    m, n_nodes, L, n_stored = struct.unpack_from("<IIII", blob, 4)
    dt, eps = struct.unpack_from("<dd", blob, 20)
    off = 36
    times = np.frombuffer(blob, dtype="<f8", count=n_stored, offset=off)
    off += 8 * n_stored
    values = np.frombuffer(blob, dtype="<f8", count=n_stored * n_nodes**m * L, offset=off)
    values = values.reshape((n_stored,) + (n_nodes,) * m + (L,))
    meta = {
        "m": m,
        "n_nodes": n_nodes,
        "L": L,
        "n_stored": n_stored,
        "dt": dt,
        "epsilon": None if np.isnan(eps) else eps,
    }
    return meta, times.copy(), values.copy()


def save_trajectory_csv(traj: Trajectory, path) -> None:
    """CSV dump with header t,node,c0..c{L-1}; node is the flattened C-order index."""
    L = traj.values.shape[-1]
    cols = ",".join(f"c{i}" for i in range(L))
    with open(path, "w") as fh:
        fh.write(f"t,node,{cols}\n")
        for t, snap in zip(traj.times, traj.values):
            flat = snap.reshape(-1, L)
            for node, row in enumerate(flat):
                vals = ",".join(repr(float(x)) for x in row)
                fh.write(f"{float(t)!r},{node},{vals}\n")
