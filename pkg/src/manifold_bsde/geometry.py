"""Embedded-submanifold toolkit.

A compact manifold N sits inside R^L. Everything downstream needs only a
handful of maps: the nearest-point projection (valid in a tube around N),
the ambient distance to N, tangent/normal splitting, the second fundamental
form, and the truncated squared-distance penalty with its gradient. Built-in
manifolds (unit spheres, a product of two circles) carry closed forms for
all of these; user-defined manifolds supply ``project`` and ``dist`` and the
rest falls back to finite differences.

All callables are vectorized over a leading batch shape: points and vectors
have shape ``(..., L)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NotOnManifold, NotTangent, OutsideTube

ON_MANIFOLD_TOL = 1e-9
TANGENT_TOL = 1e-9
FD_STEP_FIRST = 1e-5
FD_STEP_SECOND = 1e-4


def _dot(u, v):
    return np.sum(u * v, axis=-1)


def _norm(u):
    return np.sqrt(np.sum(u * u, axis=-1))


def _smoothstep(t):
    """C^2 quintic ramp: 0 at t<=0, 1 at t>=1, zero 1st/2nd derivatives at both ends."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (10.0 + t * (6.0 * t - 15.0))


def _chi_bridge(t):
    # Quintic on [0,1] with value/slope (0,1) at 0 and (1,0) at 1, zero curvature
    # at both ends; its derivative 1 + 12t^2 - 28t^3 + 15t^4 is nonnegative.
    return t * (1.0 + t * t * (4.0 + t * (3.0 * t - 7.0)))


def _chi_bridge_prime(t):
    return 1.0 + t * t * (12.0 + t * (15.0 * t - 28.0))


@dataclass(frozen=True)
class CutoffProfile:
    """Cut-off phi and truncation chi attached to a tube radius.

    ``phi(s)`` is 1 below ``inner_radius``, 0 above ``outer_radius`` with a C^2
    monotone bridge. ``chi(s)`` equals s below ``inner_radius**2``, is constant
    ``4*inner_radius**2`` above ``(2*inner_radius)**2`` and has chi' >= 0
    everywhere. Both are quintic splines, exactly evaluable.
    """

    inner_radius: float

    @property
    def outer_radius(self) -> float:
        return 2.0 * self.inner_radius

    def phi(self, s):
        s = np.asarray(s, dtype=float)
        d0 = self.inner_radius
        return 1.0 - _smoothstep((s - d0) / d0)

    def chi(self, s):
        s = np.asarray(s, dtype=float)
        a = self.inner_radius**2
        b = 4.0 * a
        w = b - a
        t = np.clip((s - a) / w, 0.0, 1.0)
        bridged = a + w * _chi_bridge(t)
        return np.where(s <= a, s, np.where(s >= b, b, bridged))

    def chi_prime(self, s):
        s = np.asarray(s, dtype=float)
        a = self.inner_radius**2
        b = 4.0 * a
        t = np.clip((s - a) / (b - a), 0.0, 1.0)
        return np.where(s <= a, 1.0, np.where(s >= b, 0.0, _chi_bridge_prime(t)))


@dataclass
class EmbeddedManifold:
    """Callable geometry descriptor for a compact N embedded in R^L.

    ``project`` is the nearest-point map, defined on the tube of radius
    ``3 * tube_radius``; ``dist`` is globally defined. The optional closed-form
    hooks short-circuit the finite-difference fallbacks:

    * ``sff_closed(p, u, w)``: second fundamental form for on-manifold p and
      tangent u, w.
    * ``proj_hessian_closed(q, u)``: quadratic form of the Hessian of the
      projection at q (any tube point), applied to an ambient vector u.
    * ``tangent_basis_closed(p)``: orthonormal tangent basis, shape (..., n, L).

    ``radius_bound`` is max |p| over N, used by divergence guards.
    """

    name: str
    ambient_dim: int
    intrinsic_dim: int
    tube_radius: float
    radius_bound: float
    project: Callable[[np.ndarray], np.ndarray]
    dist: Callable[[np.ndarray], np.ndarray]
    sff_closed: Optional[Callable] = None
    proj_hessian_closed: Optional[Callable] = None
    tangent_basis_closed: Optional[Callable] = None
    # mask of points whose nearest-point projection is unique; None means the
    # generic tube test dist < 3*tube_radius
    projection_ok: Optional[Callable] = None
    cutoff: CutoffProfile = field(init=False)

    def __post_init__(self):
        if not 0 < self.tube_radius:
            raise ValueError("tube_radius must be positive")
        if not 0 < self.intrinsic_dim < self.ambient_dim:
            raise ValueError("need 0 < intrinsic_dim < ambient_dim")
        self.cutoff = CutoffProfile(self.tube_radius)


def make_sphere(ambient_dim: int, delta0: float = 0.25) -> EmbeddedManifold:
    """Unit sphere S^{ambient_dim-1} in R^ambient_dim with closed forms."""
    if ambient_dim < 2:
        raise ValueError("sphere needs ambient dimension >= 2")
    if not 0 < delta0 < 1.0 / 3.0:
        raise ValueError("sphere tube requires 0 < delta0 < 1/3")

    def project(p):
        p = np.asarray(p, dtype=float)
        return p / _norm(p)[..., None]

    def dist(p):
        p = np.asarray(p, dtype=float)
        return np.abs(_norm(p) - 1.0)

    def sff(p, u, w):
        return -_dot(u, w)[..., None] * p

    def proj_hessian(q, u):
        q = np.asarray(q, dtype=float)
        u = np.asarray(u, dtype=float)
        r2 = np.sum(q * q, axis=-1)[..., None]
        r = np.sqrt(r2)
        qu = _dot(q, u)[..., None]
        uu = _dot(u, u)[..., None]
        return (-2.0 * u * qu - q * uu) / (r2 * r) + 3.0 * q * qu * qu / (r2 * r2 * r)

    if ambient_dim == 2:

        def basis(p):
            p = np.asarray(p, dtype=float)
            b = np.stack([-p[..., 1], p[..., 0]], axis=-1)
            return b[..., None, :]

    elif ambient_dim == 3:

        def basis(p):
            p = np.asarray(p, dtype=float)
            # cross with the axis least aligned with p, then complete the frame
            axes = np.eye(3)
            pick = np.argmin(np.abs(p), axis=-1)
            e = axes[pick]
            b1 = np.cross(p, e)
            b1 = b1 / _norm(b1)[..., None]
            b2 = np.cross(p, b1)
            b2 = b2 / _norm(b2)[..., None]
            return np.stack([b1, b2], axis=-2)

    else:
        basis = None

    return EmbeddedManifold(
        name=f"sphere{ambient_dim}",
        ambient_dim=ambient_dim,
        intrinsic_dim=ambient_dim - 1,
        tube_radius=delta0,
        radius_bound=1.0,
        project=project,
        dist=dist,
        sff_closed=sff,
        proj_hessian_closed=proj_hessian,
        tangent_basis_closed=basis,
        projection_ok=lambda p: _norm(np.asarray(p, dtype=float)) > 1e-12,
    )


def make_product_torus(delta0: float = 0.25) -> EmbeddedManifold:
    """Product of two unit circles, S^1 x S^1 in R^4, with blockwise closed forms."""
    if not 0 < delta0 < 1.0 / 3.0:
        raise ValueError("torus tube requires 0 < delta0 < 1/3")

    def _blocks(p):
        return p[..., 0:2], p[..., 2:4]

    def project(p):
        p = np.asarray(p, dtype=float)
        a, b = _blocks(p)
        return np.concatenate(
            [a / _norm(a)[..., None], b / _norm(b)[..., None]], axis=-1
        )

    def dist(p):
        p = np.asarray(p, dtype=float)
        a, b = _blocks(p)
        return np.hypot(_norm(a) - 1.0, _norm(b) - 1.0)

    def sff(p, u, w):
        pa, pb = _blocks(np.asarray(p, dtype=float))
        ua, ub = _blocks(np.asarray(u, dtype=float))
        wa, wb = _blocks(np.asarray(w, dtype=float))
        return np.concatenate(
            [-_dot(ua, wa)[..., None] * pa, -_dot(ub, wb)[..., None] * pb], axis=-1
        )

    def _circle_hessian(q, u):
        r2 = np.sum(q * q, axis=-1)[..., None]
        r = np.sqrt(r2)
        qu = _dot(q, u)[..., None]
        uu = _dot(u, u)[..., None]
        return (-2.0 * u * qu - q * uu) / (r2 * r) + 3.0 * q * qu * qu / (r2 * r2 * r)

    def proj_hessian(q, u):
        qa, qb = _blocks(np.asarray(q, dtype=float))
        ua, ub = _blocks(np.asarray(u, dtype=float))
        return np.concatenate(
            [_circle_hessian(qa, ua), _circle_hessian(qb, ub)], axis=-1
        )

    def basis(p):
        p = np.asarray(p, dtype=float)
        a, b = _blocks(p)
        na = _norm(a)[..., None]
        nb = _norm(b)[..., None]
        zeros = np.zeros_like(a)
        b1 = np.concatenate(
            [np.stack([-a[..., 1], a[..., 0]], axis=-1) / na, zeros], axis=-1
        )
        b2 = np.concatenate(
            [zeros, np.stack([-b[..., 1], b[..., 0]], axis=-1) / nb], axis=-1
        )
        return np.stack([b1, b2], axis=-2)

    def projection_ok(p):
        p = np.asarray(p, dtype=float)
        a, b = _blocks(p)
        return (_norm(a) > 1e-12) & (_norm(b) > 1e-12)

    return EmbeddedManifold(
        name="torus2",
        ambient_dim=4,
        intrinsic_dim=2,
        tube_radius=delta0,
        radius_bound=np.sqrt(2.0),
        project=project,
        dist=dist,
        sff_closed=sff,
        proj_hessian_closed=proj_hessian,
        tangent_basis_closed=basis,
        projection_ok=projection_ok,
    )


MANIFOLD_IDS = ("sphere2", "sphere3", "torus2")


def make_manifold(name: str, delta0: Optional[float] = None) -> EmbeddedManifold:
    """Look up a built-in manifold by id, with optional tube-radius override."""
    d0 = 0.25 if delta0 is None else float(delta0)
    if name == "sphere2":
        return make_sphere(2, d0)
    if name == "sphere3":
        return make_sphere(3, d0)
    if name == "torus2":
        return make_product_torus(d0)
    raise ValueError(f"unknown manifold id {name!r}; known: {MANIFOLD_IDS}")


# ---------------------------------------------------------------------------
# operations


def project_to_manifold(M: EmbeddedManifold, p):
    """Nearest point of N; raises where the nearest point is not unique.

    Generic manifolds guarantee uniqueness only inside the 3*delta0 tube;
    built-ins override with their exact singular set (e.g. the sphere's
    center), so points like 2*e_1 project fine.
    """
    p = np.asarray(p, dtype=float)
    if M.projection_ok is not None:
        ok = np.asarray(M.projection_ok(p))
        if not np.all(ok):
            raise OutsideTube("projection is not unique at some requested points")
    else:
        d = np.asarray(M.dist(p))
        if np.any(d >= 3.0 * M.tube_radius):
            raise OutsideTube(
                f"dist {float(np.max(d)):.6g} >= 3*delta0 = {3 * M.tube_radius:.6g}; "
                "projection may be non-unique"
            )
    return M.project(p)


def dist_to_manifold(M: EmbeddedManifold, p):
    return M.dist(np.asarray(p, dtype=float))


def tangent_basis(M: EmbeddedManifold, p):
    """Orthonormal basis of T_pN for on-manifold p, shape (..., n, L)."""
    p = np.asarray(p, dtype=float)
    if M.tangent_basis_closed is not None:
        return M.tangent_basis_closed(p)
    return _numeric_tangent_basis(M, p)


def _numeric_tangent_basis(M, p):
    # Range of the projection differential spans T_pN; the differential is a
    # rank-n orthogonal-projection-like map at p in N, so an SVD of its FD
    # Jacobian recovers an orthonormal tangent frame.
    pts = p.reshape(-1, M.ambient_dim)
    h = FD_STEP_FIRST
    frames = np.empty((pts.shape[0], M.intrinsic_dim, M.ambient_dim))
    eye = np.eye(M.ambient_dim)
    for k, q in enumerate(pts):
        cols = [(M.project(q + h * e) - M.project(q - h * e)) / (2 * h) for e in eye]
        jac = np.stack(cols, axis=1)
        u_svd, _, _ = np.linalg.svd(jac)
        frames[k] = u_svd[:, : M.intrinsic_dim].T
    return frames.reshape(p.shape[:-1] + (M.intrinsic_dim, M.ambient_dim))


def _require_on_manifold(M, p, what="point"):
    d = np.asarray(M.dist(p))
    if np.any(d > ON_MANIFOLD_TOL):
        raise NotOnManifold(
            f"{what} has dist {float(np.max(d)):.3g} > {ON_MANIFOLD_TOL:g}"
        )


def tangent_project(M: EmbeddedManifold, p_on_N, v):
    """Tangential part of v at p in N; the remainder is the normal part."""
    p = np.asarray(p_on_N, dtype=float)
    v = np.asarray(v, dtype=float)
    _require_on_manifold(M, p)
    return _tangent_project_unchecked(M, p, v)


def _tangent_project_unchecked(M, p, v):
    basis = tangent_basis(M, p)
    coeff = np.einsum("...kl,...l->...k", basis, v)
    return np.einsum("...k,...kl->...l", coeff, basis)


def _require_tangent(M, p, u, what="vector"):
    defect = _norm(u - _tangent_project_unchecked(M, p, u))
    scale = np.maximum(1.0, _norm(u))
    if np.any(defect > TANGENT_TOL * scale):
        raise NotTangent(
            f"{what} has normal component {float(np.max(defect)):.3g} > {TANGENT_TOL:g}"
        )


def proj_hessian_quadratic(M: EmbeddedManifold, q, u, h: float = FD_STEP_SECOND):
    """Quadratic form sum_ij d^2 P_N/dp_i dp_j (q) u_i u_j, any ambient u.

    Closed form when the manifold carries one; otherwise a central directional
    second difference of the projection along u.
    """
    q = np.asarray(q, dtype=float)
    u = np.asarray(u, dtype=float)
    if M.proj_hessian_closed is not None:
        return M.proj_hessian_closed(q, u)
    mag = _norm(u)[..., None]
    safe = np.where(mag > 0, mag, 1.0)
    uhat = u / safe
    second = (M.project(q + h * uhat) - 2.0 * M.project(q) + M.project(q - h * uhat)) / (
        h * h
    )
    return second * mag * mag  # zero input gives zero exactly


def second_fundamental_form(M: EmbeddedManifold, p_on_N, u, w):
    """A(p)(u, w): bilinear, symmetric, normal-valued. p on N; u, w tangent."""
    p = np.asarray(p_on_N, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    _require_on_manifold(M, p)
    _require_tangent(M, p, u, "u")
    _require_tangent(M, p, w, "w")
    if M.sff_closed is not None:
        return M.sff_closed(p, u, w)
    # polarization of the Hessian quadratic form
    plus = proj_hessian_quadratic(M, p, u + w)
    minus = proj_hessian_quadratic(M, p, u - w)
    return 0.25 * (plus - minus)


def extended_sff(M: EmbeddedManifold, p, u, hessian_at: str = "foot"):
    """Globally defined extension of the second fundamental form.

    Inside the 2*delta0 tube this is phi(dist) times the projection-Hessian
    quadratic form applied to the raw ambient u (no tangential pre-projection),
    and zero outside. ``hessian_at`` selects where the Hessian is taken:
    ``"foot"`` evaluates at the projected point (the defining formula),
    ``"point"`` at p itself (the variant used by the stability estimate);
    both agree on N.
    """
    if hessian_at not in ("foot", "point"):
        raise ValueError("hessian_at must be 'foot' or 'point'")
    p = np.asarray(p, dtype=float)
    u = np.asarray(u, dtype=float)
    p_b, u_b = np.broadcast_arrays(p, u)
    shape = p_b.shape
    pf = p_b.reshape(-1, shape[-1])
    uf = u_b.reshape(-1, shape[-1])
    d = np.asarray(M.dist(pf))
    out = np.zeros_like(pf)
    mask = d < M.cutoff.outer_radius
    if np.any(mask):
        pm = pf[mask]
        q = M.project(pm) if hessian_at == "foot" else pm
        val = proj_hessian_quadratic(M, q, uf[mask])
        out[mask] = M.cutoff.phi(d[mask])[..., None] * val
    return out.reshape(shape)


def penalty_potential(M: EmbeddedManifold, p):
    """G(p) = chi(dist^2): zero exactly on N, constant 4*delta0^2 far away."""
    d = np.asarray(M.dist(np.asarray(p, dtype=float)))
    return M.cutoff.chi(d * d)


def penalty_gradient(M: EmbeddedManifold, p):
    """Gradient of the penalty: 2*chi'(dist^2)*(p - P_N(p)), zero beyond 2*delta0."""
    p = np.asarray(p, dtype=float)
    flat = p.reshape(-1, p.shape[-1])
    d = np.asarray(M.dist(flat))
    cp = np.asarray(M.cutoff.chi_prime(d * d))
    out = np.zeros_like(flat)
    mask = cp > 0.0
    if np.any(mask):
        pm = flat[mask]
        out[mask] = 2.0 * cp[mask, None] * (pm - M.project(pm))
    return out.reshape(p.shape)


def directional_hessian(f: Callable, p, u, h: float = FD_STEP_SECOND):
    """Central second difference of a scalar field along u (not normalized)."""
    p = np.asarray(p, dtype=float)
    u = np.asarray(u, dtype=float)
    mag = _norm(u)
    safe = np.where(mag > 0, mag, 1.0)
    uhat = u / safe[..., None]
    val = (f(p + h * uhat) - 2.0 * f(p) + f(p - h * uhat)) / (h * h)
    return val * mag * mag


@dataclass(frozen=True)
class KeyInequalityReport:
    """Sampled evidence for the penalty stability inequality.

    ``min_ratio_*`` is the minimum over off-manifold samples of
    [Hess G(u,u) + <g, Abar(u,u) - 2*fbar>] / [G * (1 + |u|^2)], with the
    extension Hessian taken at the foot point or at the point itself.
    ``max_generator_orthogonality`` and ``max_tangent_orthogonality`` record
    how far <g, fbar> and <g, tangent frame> are from zero inside the tube.
    """

    n_samples: int
    min_ratio_foot: float
    min_ratio_point: float
    max_generator_orthogonality: float
    max_tangent_orthogonality: float
    orthogonality_tol: float

    @property
    def orthogonality_ok(self) -> bool:
        return (
            self.max_generator_orthogonality <= self.orthogonality_tol
            and self.max_tangent_orthogonality <= self.orthogonality_tol
        )


def verify_key_inequality(
    M: EmbeddedManifold,
    fbar: Optional[Callable],
    sample_points,
    sample_vectors,
    orthogonality_tol: float = 1e-9,
) -> KeyInequalityReport:
    """Evaluate the lower-bound ratio and orthogonality identities on samples.

    ``fbar(p, u)`` takes points (S, L) and noise blocks (S, m, L); None means
    the zero generator. Report-only: nothing is asserted here.
    """
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    vecs = np.atleast_2d(np.asarray(sample_vectors, dtype=float))
    d = np.asarray(M.dist(pts))

    hess_g = directional_hessian(lambda q: penalty_potential(M, q), pts, vecs)
    g = penalty_gradient(M, pts)
    if fbar is None:
        fb = np.zeros_like(pts)
    else:
        fb = fbar(pts, vecs[:, None, :])
    abar_foot = extended_sff(M, pts, vecs, hessian_at="foot")
    abar_point = extended_sff(M, pts, vecs, hessian_at="point")

    G = penalty_potential(M, pts)
    denom = G * (1.0 + _dot(vecs, vecs))
    off = G > 1e-14

    def min_ratio(abar):
        lhs = hess_g + _dot(g, abar - 2.0 * fb)
        if not np.any(off):
            return 0.0
        return float(np.min(lhs[off] / denom[off]))

    in_tube = d < 3.0 * M.tube_radius
    max_gen = 0.0
    if np.any(in_tube):
        max_gen = float(np.max(np.abs(_dot(g[in_tube], fb[in_tube]))))
    inner = d < M.tube_radius
    max_tan = 0.0
    if np.any(inner):
        feet = M.project(pts[inner])
        frame = tangent_basis(M, feet)
        proj = np.einsum("skl,sl->sk", frame, g[inner])
        max_tan = float(np.max(np.abs(proj))) if proj.size else 0.0

    return KeyInequalityReport(
        n_samples=pts.shape[0],
        min_ratio_foot=min_ratio(abar_foot),
        min_ratio_point=min_ratio(abar_point),
        max_generator_orthogonality=max_gen,
        max_tangent_orthogonality=max_tan,
        orthogonality_tol=orthogonality_tol,
    )
