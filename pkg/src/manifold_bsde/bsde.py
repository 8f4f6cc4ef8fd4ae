"""Stochastic side: Brownian paths, (Y, Z) assembly, residuals, martingales.

The solved field v gives a candidate solution of the backward equation via
Y_t = v(T - t, B_t + x) and Z_t = grad_x v(T - t, B_t + x). Everything here
audits that candidate along simulated paths: the Ito residual of the backward
equation, the weak (test-function) form, the local-martingale property of
g(Y) corrected by its Hessian term, and the tangency/on-manifold defects.

Quadrature of all ds- and dB-integrals is left-point (Ito) throughout.
Space-time interpolation of the stored field is linear in t and multilinear
in x, so residual orders are interpretable against the second-order stencil.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import GridMismatch, InsufficientPaths
from .generators import Generator, eval_extended_generator
from .geometry import (
    EmbeddedManifold,
    _dot,
    _norm,
    _tangent_project_unchecked,
    extended_sff,
)
from .pde import Trajectory


@dataclass(frozen=True)
class BrownianPath:
    """Discrete Brownian path with reproducible counter-based increments."""

    seed: tuple
    dt: float
    m: int
    increments: np.ndarray  # (K, m)

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    @property
    def T(self) -> float:
        return self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def positions(self) -> np.ndarray:
        """Partial sums B_{t_j}, shape (K+1, m), B_0 = 0."""
        out = np.zeros((self.n_steps + 1, self.m))
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out


def _normal_stream(seed, shape):
    raw = np.asarray(seed, dtype=np.uint64).reshape(-1)
    key = np.zeros(2, dtype=np.uint64)
    key[: raw.size] = raw[:2]
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.standard_normal(shape)


def sample_brownian(seed, dt: float, T: float, m: int) -> BrownianPath:
    """Gaussian increments from a Philox (counter-based) stream keyed by seed.

    ``seed`` may be an int or a tuple (master, path_index); identical seeds
    reproduce identical paths regardless of how many paths are drawn around
    them.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    K = int(round(T / dt))
    if abs(K * dt - T) > 1e-12 * max(1.0, abs(T)):
        raise ValueError(f"dt={dt!r} does not divide T={T!r}")
    seed_t = (seed,) if np.isscalar(seed) else tuple(seed)
    incs = _normal_stream(seed_t, (K, m)) * np.sqrt(dt)
    return BrownianPath(seed=seed_t, dt=dt, m=m, increments=incs)


def coarsen_path(path: BrownianPath, factor: int) -> BrownianPath:
    """Aggregate increments in groups: the coarse path the fine one refines."""
    if path.n_steps % factor:
        raise ValueError("factor must divide the number of steps")
    incs = path.increments.reshape(-1, factor, path.m).sum(axis=1)
    return BrownianPath(seed=path.seed, dt=path.dt * factor, m=path.m, increments=incs)


def truncate_path(path: BrownianPath, j: int) -> BrownianPath:
    """Zero all increments from step j on; used by the adaptedness audit."""
    incs = path.increments.copy()
    incs[j:] = 0.0
    return BrownianPath(seed=path.seed, dt=path.dt, m=path.m, increments=incs)


# ---------------------------------------------------------------------------
# space-time interpolation of stored trajectories


def _time_weights(traj: Trajectory, eval_times: np.ndarray):
    a = (eval_times - traj.times[0]) / traj.store_dt
    k = np.clip(np.floor(a).astype(int), 0, len(traj.times) - 2)
    lam = np.clip(a - k, 0.0, 1.0)
    return k, lam


def _gather(A: np.ndarray, k, idx):
    """A is (S, n, ...) for m=1 or (S, n, n, ...) for m=2; idx per axis."""
    if len(idx) == 1:
        return A[k, idx[0]]
    return A[k, idx[0], idx[1]]


def _interp_stored(A: np.ndarray, traj: Trajectory, eval_times, positions):
    """Interpolate a per-stored-state array linearly in t, multilinearly in x.

    ``A`` has shape (S,) + grid.shape + tail; ``positions`` is (P, J, m) on
    the unit torus; ``eval_times`` is (J,). Returns (P, J) + tail.
    """
    grid = traj.grid
    n = grid.n_nodes
    k, lam = _time_weights(traj, np.asarray(eval_times, dtype=float))
    scaled = np.asarray(positions, dtype=float) * n
    base = np.floor(scaled)
    frac = scaled - base
    i0 = base.astype(int) % n
    i1 = (i0 + 1) % n

    tail_axes = A.ndim - 1 - grid.m  # axes after the spatial ones
    kk = k[None, :]

    def expand(wt):
        return wt.reshape(wt.shape + (1,) * tail_axes)

    def spatial(k_idx):
        if grid.m == 1:
            f = expand(frac[..., 0])
            return (1.0 - f) * _gather(A, k_idx, (i0[..., 0],)) + f * _gather(
                A, k_idx, (i1[..., 0],)
            )
        fx = expand(frac[..., 0])
        fy = expand(frac[..., 1])
        v00 = _gather(A, k_idx, (i0[..., 0], i0[..., 1]))
        v10 = _gather(A, k_idx, (i1[..., 0], i0[..., 1]))
        v01 = _gather(A, k_idx, (i0[..., 0], i1[..., 1]))
        v11 = _gather(A, k_idx, (i1[..., 0], i1[..., 1]))
        return (
            (1.0 - fx) * (1.0 - fy) * v00
            + fx * (1.0 - fy) * v10
            + (1.0 - fx) * fy * v01
            + fx * fy * v11
        )

    lo = spatial(kk)
    hi = spatial(kk + 1)
    w = expand(lam[None, :])
    return (1.0 - w) * lo + w * hi


def interp_field(traj: Trajectory, eval_times, positions):
    return _interp_stored(traj.values, traj, eval_times, positions)


def interp_gradient(traj: Trajectory, eval_times, positions):
    return _interp_stored(traj.gradients, traj, eval_times, positions)


# ---------------------------------------------------------------------------
# sample assembly


@dataclass
class BSDESample:
    """One path's assembled candidate solution (Y_j, Z_j) with terminal xi."""

    x: np.ndarray
    path: BrownianPath
    Y: np.ndarray  # (K+1, L)
    Z: np.ndarray  # (K+1, m, L)
    xi: np.ndarray  # h(B_T + x)

    @property
    def dt(self) -> float:
        return self.path.dt

    @property
    def terminal_mismatch(self) -> float:
        return float(np.linalg.norm(self.Y[-1] - self.xi))


def _check_alignment(traj: Trajectory, path: BrownianPath):
    if abs(path.T - traj.t_final) > 1e-9 * max(1.0, traj.t_final):
        raise GridMismatch(
            f"path horizon {path.T!r} does not match trajectory {traj.t_final!r}"
        )
    if path.m != traj.grid.m:
        raise GridMismatch(f"path has m={path.m}, trajectory m={traj.grid.m}")


def assemble_batch(traj: Trajectory, positions: np.ndarray, eval_times: np.ndarray):
    """(Y, Z) for a batch of torus position histories, shape (P, K+1, m)."""
    pos = np.mod(positions, 1.0)
    Y = interp_field(traj, eval_times, pos)
    Z = interp_gradient(traj, eval_times, pos)
    return Y, Z


def assemble_bsde_sample(
    traj: Trajectory, path: BrownianPath, x, h: Callable
) -> BSDESample:
    """Y_j = v(T - t_j, B_j + x), Z_j = grad v(T - t_j, B_j + x), xi = h(B_T + x)."""
    _check_alignment(traj, path)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    pos = (path.positions + x)[None]  # (1, K+1, m)
    eval_times = traj.t_final - path.times
    Y, Z = assemble_batch(traj, pos, eval_times)
    xi = np.asarray(h(np.mod(path.positions[-1] + x, 1.0)), dtype=float)
    return BSDESample(x=x, path=path, Y=Y[0], Z=Z[0], xi=xi)


# ---------------------------------------------------------------------------
# residuals


@dataclass(frozen=True)
class ResidualLedger:
    """Per-index residual of the backward equation along one path.

    The residual is anchored at the assembled terminal value, so the terminal
    entry vanishes identically (telescoping); how well Y_K matches the exact
    h(B_T + x) is a separate interpolation-level check on the sample.
    """

    residuals: np.ndarray  # (K+1,) Euclidean norms
    stochastic_part: float
    sff_drift_part: float
    generator_drift_part: float
    dt: float

    @property
    def max_residual(self) -> float:
        return float(np.max(self.residuals))

    @property
    def terminal_residual(self) -> float:
        return float(self.residuals[-1])


def _drift_terms(Y, Z, G: Generator, M: EmbeddedManifold):
    """Left-point Abar and fbar terms for every step, shapes (K, L)."""
    Yk = Y[:-1]
    Zk = Z[:-1]
    m = Zk.shape[-2]
    abar = np.zeros_like(Yk)
    for i in range(m):
        abar += extended_sff(M, Yk, Zk[:, i, :])
    fbar = eval_extended_generator(G, M, Yk, Zk)
    return abar, fbar


def bsde_residual(sample: BSDESample, G: Generator, M: EmbeddedManifold) -> ResidualLedger:
    """r_j = Y_j - [Y_K - sum Z dB - 1/2 sum Abar dt + sum fbar dt] over k >= j."""
    Y, Z = sample.Y, sample.Z
    dB = sample.path.increments
    dt = sample.path.dt
    abar, fbar = _drift_terms(Y, Z, G, M)
    zdb = np.einsum("kil,ki->kl", Z[:-1], dB)
    contrib = zdb + 0.5 * dt * abar - dt * fbar

    def suffix(c):
        out = np.zeros((c.shape[0] + 1, c.shape[1]))
        out[:-1] = np.cumsum(c[::-1], axis=0)[::-1]
        return out

    rhs = Y[-1][None, :] - suffix(contrib)
    res = _norm(Y - rhs)
    return ResidualLedger(
        residuals=res,
        stochastic_part=float(np.max(_norm(suffix(zdb)))),
        sff_drift_part=float(np.max(_norm(suffix(0.5 * dt * abar)))),
        generator_drift_part=float(np.max(_norm(suffix(dt * fbar)))),
        dt=dt,
    )


def weak_residual(
    samples: Sequence[BSDESample],
    psi: Callable,
    t: float,
    G: Generator,
    M: EmbeddedManifold,
) -> float:
    """Difference of the two sides of the tested (weak) backward identity at t.

    All samples must share one Brownian path, with start points covering a
    quadrature grid of the torus; spatial integrals become means over that
    grid.
    """
    path = samples[0].path
    for s in samples[1:]:
        if s.path is not path and not np.array_equal(
            s.path.increments, path.increments
        ):
            raise ValueError("weak residual needs a common Brownian path")
    dt = path.dt
    K = path.n_steps
    j0 = int(round(t / dt))
    if abs(j0 * dt - t) > 1e-9:
        raise ValueError("t must sit on the path time grid")

    psi_x = np.stack(
        [np.asarray(psi(np.mod(s.x, 1.0)), dtype=float) for s in samples]
    )  # (S, L)
    Y = np.stack([s.Y for s in samples])  # (S, K+1, L)
    Z = np.stack([s.Z for s in samples])  # (S, K+1, m, L)
    xi = np.stack([s.xi for s in samples])

    lhs = float(np.mean(_dot(Y[:, j0, :], psi_x)))
    term_xi = float(np.mean(_dot(xi, psi_x)))

    m = Z.shape[-2]
    zdb = 0.0
    for i in range(m):
        weighted = np.mean(_dot(Z[:, :-1, i, :], psi_x[:, None, :]), axis=0)  # (K,)
        zdb += float(np.sum(weighted[j0:] * path.increments[j0:, i]))

    abar_term = 0.0
    fbar_term = 0.0
    for s, w in zip(samples, psi_x):
        abar, fbar = _drift_terms(s.Y, s.Z, G, M)
        abar_term += float(np.sum(abar[j0:] @ w)) * dt
        fbar_term += float(np.sum(fbar[j0:] @ w)) * dt
    abar_term /= len(samples)
    fbar_term /= len(samples)

    rhs = term_xi - zdb - 0.5 * abar_term + fbar_term
    return lhs - rhs


# ---------------------------------------------------------------------------
# observables and martingale tests


@dataclass(frozen=True)
class Observable:
    """C^2 scalar on N with tangential gradient and Hessian quadratic form."""

    name: str
    value: Callable
    grad: Callable
    hess_quad: Callable


def coordinate_observable(M: EmbeddedManifold, axis: int) -> Observable:
    """g(p) = <p, e_axis> with the closed-form sphere/product-circle Hessian."""
    L = M.ambient_dim

    if M.name.startswith("sphere"):

        def value(p):
            return p[..., axis]

        def grad(p):
            e = np.zeros(L)
            e[axis] = 1.0
            return e - p[..., axis][..., None] * p

        def hess_quad(p, u):
            return -_dot(u, u) * p[..., axis]

    elif M.name == "torus2":
        block = slice(0, 2) if axis < 2 else slice(2, 4)
        e_block = np.zeros(2)
        e_block[axis % 2] = 1.0

        def value(p):
            return p[..., axis]

        def grad(p):
            out = np.zeros_like(p)
            pb = p[..., block]
            out[..., block] = e_block - p[..., axis][..., None] * pb
            return out

        def hess_quad(p, u):
            ub = u[..., block]
            return -_dot(ub, ub) * p[..., axis]

    else:
        raise ValueError("coordinate observables exist for the built-in manifolds")

    return Observable(
        name=f"coord{axis}", value=value, grad=grad, hess_quad=hess_quad
    )


def constant_observable() -> Observable:
    return Observable(
        name="const1",
        value=lambda p: np.ones(p.shape[:-1]),
        grad=lambda p: np.zeros_like(p),
        hess_quad=lambda p, u: np.zeros(p.shape[:-1]),
    )


def martingale_path(
    sample: BSDESample,
    obs: Observable,
    G: Generator,
    M: EmbeddedManifold,
    drift_sign: float = 1.0,
) -> np.ndarray:
    """Discrete M^g along one sample; left-point quadrature of both integrals.

    ``drift_sign=-1`` deliberately corrupts the Hessian correction (the
    negative control of the martingale test).
    """
    Y, Z = sample.Y, sample.Z
    dt = sample.path.dt
    m = Z.shape[-2]
    hess = np.zeros(Y.shape[0] - 1)
    for i in range(m):
        hess += obs.hess_quad(Y[:-1], Z[:-1, i, :])
    out = obs.value(Y) - obs.value(Y[0])
    correction = -0.5 * drift_sign * np.cumsum(hess) * dt
    if G.kind != "zero":
        fbar = eval_extended_generator(G, M, Y[:-1], Z[:-1])
        correction = correction + np.cumsum(_dot(obs.grad(Y[:-1]), fbar)) * dt
    out[1:] += correction
    return out


@dataclass(frozen=True)
class MartingaleTestResult:
    checkpoints: tuple
    means: np.ndarray
    stderrs: np.ndarray
    zscores: np.ndarray
    n_paths: int
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(np.all(self.zscores <= self.threshold))


def martingale_test(
    m_values: np.ndarray, checkpoints, threshold: float = 4.0
) -> MartingaleTestResult:
    """z-statistics of ensemble means of M^g at the checkpoints.

    ``m_values`` has shape (n_paths, n_checkpoints). Passing means every
    |mean| / stderr is at most the threshold (default 4).
    """
    m_values = np.asarray(m_values, dtype=float)
    n = m_values.shape[0]
    if n < 100:
        raise InsufficientPaths(f"need >= 100 paths, got {n}")
    means = np.mean(m_values, axis=0)
    stds = np.std(m_values, axis=0, ddof=1)
    stderrs = stds / np.sqrt(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.abs(means) / stderrs
    z = np.where(stderrs == 0.0, np.where(means == 0.0, 0.0, np.inf), z)
    return MartingaleTestResult(
        checkpoints=tuple(float(c) for c in checkpoints),
        means=means,
        stderrs=stderrs,
        zscores=z,
        n_paths=n,
        threshold=threshold,
    )


def martingale_ensemble(
    traj: Trajectory,
    M: EmbeddedManifold,
    G: Generator,
    obs: Observable,
    n_paths: int,
    dt: float,
    x0,
    seed: int,
    checkpoints: Sequence[float],
    drift_sign: float = 1.0,
    batch_size: int = 500,
    workers: int = 1,
) -> np.ndarray:
    """M^g at the checkpoints for n_paths independent paths, shape (P, n_cp).

    Path p draws its increments from a Philox stream keyed by (seed, p), so
    results are independent of batch size and worker count; batches are
    reduced in fixed order.
    """
    T = traj.t_final
    K = int(round(T / dt))
    if abs(K * dt - T) > 1e-12 * max(1.0, T):
        raise ValueError(f"dt={dt!r} does not divide the horizon {T!r}")
    cp_idx = []
    for c in checkpoints:
        j = int(round(c / dt))
        if abs(j * dt - c) > 1e-9:
            raise ValueError(f"checkpoint {c} not on the path grid")
        cp_idx.append(j)
    cp_idx = np.asarray(cp_idx, dtype=int)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    eval_times = T - np.arange(K + 1) * dt

    def run_batch(p_lo, p_hi):
        n_b = p_hi - p_lo
        incs = np.empty((n_b, K, traj.grid.m))
        for b, p in enumerate(range(p_lo, p_hi)):
            incs[b] = _normal_stream((seed, p), (K, traj.grid.m))
        incs *= np.sqrt(dt)
        pos = np.zeros((n_b, K + 1, traj.grid.m))
        np.cumsum(incs, axis=1, out=pos[:, 1:])
        pos += x0
        Y, Z = assemble_batch(traj, pos, eval_times)
        hess = np.zeros((n_b, K))
        for i in range(traj.grid.m):
            hess += obs.hess_quad(Y[:, :-1], Z[:, :-1, i, :])
        mart = obs.value(Y) - obs.value(Y[:, :1])
        corr = -0.5 * drift_sign * np.cumsum(hess, axis=1) * dt
        if G.kind != "zero":
            Yk = Y[:, :-1].reshape(-1, Y.shape[-1])
            Zk = Z[:, :-1].reshape(-1, traj.grid.m, Y.shape[-1])
            fb = eval_extended_generator(G, M, Yk, Zk).reshape(n_b, K, -1)
            corr = corr + np.cumsum(_dot(obs.grad(Y[:, :-1]), fb), axis=1) * dt
        mart[:, 1:] += corr
        return mart[:, cp_idx]

    bounds = [
        (lo, min(lo + batch_size, n_paths)) for lo in range(0, n_paths, batch_size)
    ]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(lambda b: run_batch(*b), bounds))
    else:
        chunks = [run_batch(*b) for b in bounds]
    return np.concatenate(chunks, axis=0)


# ---------------------------------------------------------------------------
# defects


def tangency_defect(sample: BSDESample, M: EmbeddedManifold) -> float:
    """Time-weighted normal energy of Z relative to its total energy (0/0 -> 0)."""
    Y, Z = sample.Y, sample.Z
    m = Z.shape[-2]
    feet = M.project(Y)
    num = 0.0
    den = 0.0
    for i in range(m):
        zi = Z[:, i, :]
        tan = _tangent_project_unchecked(M, feet, zi)
        num += float(np.sum(_norm(zi - tan) ** 2))
        den += float(np.sum(_norm(zi) ** 2))
    if den == 0.0:
        return 0.0
    return num / den


def on_manifold_defect(sample: BSDESample, M: EmbeddedManifold) -> float:
    return float(np.max(M.dist(sample.Y)))
