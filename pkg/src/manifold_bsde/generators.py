"""Drivers f(p, u) in the tangent space and their global ambient extension.

A generator maps an on-manifold point p and a block of m tangent vectors
u = (u_1, ..., u_m) to a tangent vector at p, with linear growth in u. The
extension multiplies by the tube cut-off and pre-projects everything to the
foot point, so it is defined on all of R^L x R^{m x L} and vanishes beyond
the 2*delta0 tube.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NotOnManifold, NotTangent
from .geometry import (
    EmbeddedManifold,
    _dot,
    _norm,
    _require_on_manifold,
    _require_tangent,
    _tangent_project_unchecked,
)

GENERATOR_IDS = ("zero", "rotation", "shear")


@dataclass(frozen=True)
class Generator:
    """Tangent-valued driver with a declared linear-growth constant.

    ``eval_raw(p, u)`` takes points of shape (..., L) and noise blocks of
    shape (..., m, L) with every u_i tangent at p, and returns a tangent
    vector at p. The declared ``lipschitz_bound`` is the author's constant in
    |f(p,u)| <= C0 (1 + |u|); ``estimate_growth_constants`` cross-checks it by
    sampling but never asserts.
    """

    kind: str
    param: float
    lipschitz_bound: float
    eval_raw: Callable[[np.ndarray, np.ndarray], np.ndarray]


def _rotation_matrix(M: EmbeddedManifold) -> np.ndarray:
    L = M.ambient_dim
    omega = np.zeros((L, L))
    if M.name == "torus2":
        omega[0, 1] = -1.0
        omega[1, 0] = 1.0
        omega[2, 3] = -1.0
        omega[3, 2] = 1.0
    else:
        # rotation in the (e1, e2) plane; skew, so <Omega p, p> = 0 and the
        # image is automatically tangent on the sphere
        omega[0, 1] = -1.0
        omega[1, 0] = 1.0
    return omega


def make_generator(kind: str, M: EmbeddedManifold, c: float = 1.0) -> Generator:
    """Build one of the built-in generators for manifold M."""
    if kind == "zero":
        return Generator(
            kind="zero",
            param=0.0,
            lipschitz_bound=0.0,
            eval_raw=lambda p, u: np.zeros_like(p),
        )
    if kind == "rotation":
        omega = _rotation_matrix(M)

        def eval_rotation(p, u):
            return c * (p @ omega.T)

        return Generator(
            kind="rotation",
            param=c,
            lipschitz_bound=abs(c) * M.radius_bound,
            eval_raw=eval_rotation,
        )
    if kind == "shear":
        # u-dependent driver: tangential projection of the first noise block
        def eval_shear(p, u):
            return c * _tangent_project_unchecked(M, p, u[..., 0, :])

        return Generator(
            kind="shear", param=c, lipschitz_bound=abs(c), eval_raw=eval_shear
        )
    raise ValueError(f"unknown generator id {kind!r}; known: {GENERATOR_IDS}")


def eval_generator(G: Generator, M: EmbeddedManifold, p_on_N, u):
    """f(p, u) with full precondition checks (p on N, every u_i tangent)."""
    p = np.asarray(p_on_N, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != M.ambient_dim:
        raise ValueError("u must have shape (..., m, L)")
    if u.ndim == 1:
        u = u[None, :]
    _require_on_manifold(M, p)
    for i in range(u.shape[-2]):
        _require_tangent(M, p, u[..., i, :], f"u_{i + 1}")
    return G.eval_raw(p, u)


def eval_extended_generator(G: Generator, M: EmbeddedManifold, p, u):
    """fbar(p, u) = phi(dist) f(P_N(p), Pi u) in the 2*delta0 tube, else 0.

    Globally defined; the result lies in the tangent space at the foot point,
    which is what makes <penalty gradient, fbar> vanish identically.
    """
    p = np.asarray(p, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.ndim == p.ndim:
        u = u[..., None, :]
    pf = p.reshape(-1, M.ambient_dim)
    m = u.shape[-2]
    uf = np.broadcast_to(u, p.shape[:-1] + (m, M.ambient_dim)).reshape(
        -1, m, M.ambient_dim
    )
    out = np.zeros_like(pf)
    d = np.asarray(M.dist(pf))
    mask = d < M.cutoff.outer_radius
    if np.any(mask):
        feet = M.project(pf[mask])
        um = uf[mask]
        u_tan = np.empty_like(um)
        for i in range(m):
            u_tan[:, i, :] = _tangent_project_unchecked(M, feet, um[:, i, :])
        vals = G.eval_raw(feet, u_tan)
        out[mask] = M.cutoff.phi(d[mask])[:, None] * vals
    return out.reshape(p.shape)


def estimate_growth_constants(
    G: Generator, M: EmbeddedManifold, n_samples: int, m: int = 1, seed: int = 0
):
    """Empirical (C0_hat, C1_hat): max |fbar|/(1+|u|) and max FD derivative norm.

    Sampled over random tube points and Gaussian noise blocks of varied
    magnitude. Recorded into reports, never used to assert.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    on_n = M.project(rng.normal(size=(n_samples, M.ambient_dim)))
    # ambient nudges of norm < 0.9*delta0 keep every sample inside the inner tube
    eta = rng.normal(size=(n_samples, M.ambient_dim))
    eta *= (rng.uniform(0.0, 0.9, size=n_samples) * M.tube_radius / _norm(eta))[:, None]
    pts = on_n + eta
    scales = np.exp(rng.uniform(-1.0, 2.0, size=n_samples))
    u = rng.normal(size=(n_samples, m, M.ambient_dim)) * scales[:, None, None]

    fb = eval_extended_generator(G, M, pts, u)
    u_norm = np.sqrt(np.sum(u * u, axis=(-2, -1)))
    c0_hat = float(np.max(_norm(fb) / (1.0 + u_norm)))

    h = 1e-5
    dp = rng.normal(size=pts.shape)
    dp /= _norm(dp)[:, None]
    du = rng.normal(size=u.shape)
    du /= np.sqrt(np.sum(du * du, axis=(-2, -1)))[:, None, None]
    grad_p = (
        eval_extended_generator(G, M, pts + h * dp, u)
        - eval_extended_generator(G, M, pts - h * dp, u)
    ) / (2 * h)
    grad_u = (
        eval_extended_generator(G, M, pts, u + h * du)
        - eval_extended_generator(G, M, pts, u - h * du)
    ) / (2 * h)
    c1_hat = float(
        max(np.max(_norm(grad_p) / (1.0 + u_norm)), np.max(_norm(grad_u)))
    )
    return c0_hat, c1_hat
